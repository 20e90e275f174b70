"""Interaction module: residual identities, attention properties, gradients."""

import pytest
import torch
import torch.nn as nn

from gradcheck import finite_difference_check
from hrvvs.attention import AttentionConfigError, MultiHeadCrossAttention
from hrvvs.memory import MemoryBank
from hrvvs.msim import Msim, from_tokens, to_tokens


def make_msim(dim=32, mem_dim=24, dropout=0.1, pe=True) -> Msim:
    return Msim(dim=dim, memory_token_dim=mem_dim, heads=4, dropout=dropout, positional_encodings=pe)


def randomize_out_projections(msim: Msim, gen: torch.Generator) -> None:
    for attn in (msim.attn_history, msim.attn_locals, msim.attn_global_to_local):
        nn.init.normal_(attn.to_out.weight, std=0.2, generator=gen)
        nn.init.normal_(attn.to_out.bias, std=0.05, generator=gen)


class TestTokenLayout:
    def test_round_trip(self):
        x = torch.randn(6, 3, 5)
        assert torch.equal(from_tokens(to_tokens(x), (3, 5)), x)

    def test_row_major(self):
        x = torch.arange(12.0).reshape(1, 3, 4)
        toks = to_tokens(x)
        assert toks[0, 0] == 0 and toks[1, 0] == 1 and toks[4, 0] == 4


class TestResidualIdentity:
    def test_history_update_identity_at_init(self):
        torch.manual_seed(0)
        msim = make_msim().eval()
        g = torch.randn(32, 4, 4)
        mem = torch.randn(30, 24)
        assert torch.equal(msim.update_global_with_history(g, mem), g)

    def test_locals_update_identity_at_init(self):
        torch.manual_seed(1)
        msim = make_msim().eval()
        g = torch.randn(32, 4, 4)
        locals5 = [torch.randn(32, 4, 4) for _ in range(4)]
        assert torch.equal(msim.update_global_with_locals(g, locals5), g)
        out_locals = msim.update_locals(locals5, g)
        for a, b in zip(out_locals, locals5):
            assert torch.equal(a, b)

    def test_identity_holds_in_train_mode_too(self):
        torch.manual_seed(2)
        msim = make_msim().train()
        g = torch.randn(32, 4, 4)
        mem = torch.randn(10, 24)
        assert torch.equal(msim.update_global_with_history(g, mem), g)


class TestEmptyMemory:
    def test_bypass_bit_exact_with_random_weights(self):
        torch.manual_seed(3)
        msim = make_msim().eval()
        gen = torch.Generator().manual_seed(10)
        randomize_out_projections(msim, gen)
        g = torch.randn(32, 4, 4)
        empty = MemoryBank(capacity=4, pe_dim=16).tokens()
        assert torch.equal(msim.update_global_with_history(g, empty), g)

    def test_output_shape_independent_of_token_count(self):
        torch.manual_seed(4)
        msim = make_msim().eval()
        gen = torch.Generator().manual_seed(11)
        randomize_out_projections(msim, gen)
        g = torch.randn(32, 4, 4)
        for n in (1, 7, 85):
            out = msim.update_global_with_history(g, torch.randn(n, 24))
            assert out.shape == g.shape


class TestAttentionProperties:
    def test_rows_sum_to_one(self):
        torch.manual_seed(5)
        attn = MultiHeadCrossAttention(32, kv_dim=24, heads=4, zero_init_out=False).eval()
        q = torch.randn(2, 6, 32)
        kv = torch.randn(2, 9, 24)
        _, weights = attn(q, kv, return_attn=True)
        sums = weights.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    def test_kv_token_count_mismatch_rejected(self):
        attn = MultiHeadCrossAttention(32, heads=4)
        with pytest.raises(AttentionConfigError):
            attn(torch.randn(1, 2, 32), torch.randn(1, 3, 32), torch.randn(1, 4, 32))

    def test_uniform_attention_over_identical_keys(self):
        torch.manual_seed(6)
        msim = make_msim(pe=False).eval()
        gen = torch.Generator().manual_seed(12)
        randomize_out_projections(msim, gen)
        g = torch.ones(32, 2, 2)  # all global tokens identical
        locals5 = [torch.randn(32, 2, 2) for _ in range(4)]
        out = msim.update_locals(locals5, g)
        for loc, upd in zip(locals5, out):
            delta = upd - loc
            # every query token receives the same attended value
            flat = to_tokens(delta)
            assert torch.allclose(flat, flat[0].expand_as(flat), atol=1e-6)


class TestPermutationInvariance:
    def test_global_update_invariant_without_pe(self):
        torch.manual_seed(7)
        msim = make_msim(pe=False).eval()
        gen = torch.Generator().manual_seed(13)
        randomize_out_projections(msim, gen)
        g = torch.randn(32, 4, 4)
        locals5 = [torch.randn(32, 4, 4) for _ in range(4)]
        base = msim.update_global_with_locals(g, locals5)
        permuted = msim.update_global_with_locals(g, [locals5[2], locals5[0], locals5[3], locals5[1]])
        assert torch.allclose(base, permuted, atol=1e-6)

    def test_global_update_sensitive_with_pe(self):
        torch.manual_seed(8)
        msim = make_msim(pe=True).eval()
        gen = torch.Generator().manual_seed(14)
        randomize_out_projections(msim, gen)
        locals5 = [torch.randn(32, 4, 4) for _ in range(4)]
        g = torch.randn(32, 4, 4)
        base = msim.update_global_with_locals(g, locals5)
        permuted = msim.update_global_with_locals(g, [locals5[1], locals5[0], locals5[2], locals5[3]])
        assert not torch.allclose(base, permuted, atol=1e-6)


class TestDeterminism:
    def test_eval_mode_bit_identical(self):
        torch.manual_seed(9)
        msim = make_msim(dropout=0.3).eval()
        gen = torch.Generator().manual_seed(15)
        randomize_out_projections(msim, gen)
        g = torch.randn(32, 4, 4)
        locals5 = [torch.randn(32, 4, 4) for _ in range(4)]
        mem = torch.randn(21, 24)
        out1 = msim(g, locals5, mem)
        out2 = msim(g, locals5, mem)
        assert torch.equal(out1.global_updated, out2.global_updated)
        for a, b in zip(out1.locals_updated, out2.locals_updated):
            assert torch.equal(a, b)

    def test_update_order_is_sequential(self):
        torch.manual_seed(10)
        msim = make_msim().eval()
        gen = torch.Generator().manual_seed(16)
        randomize_out_projections(msim, gen)
        g = torch.randn(32, 4, 4)
        locals5 = [torch.randn(32, 4, 4) for _ in range(4)]
        mem = torch.randn(12, 24)
        out = msim(g, locals5, mem)
        g_h = msim.update_global_with_history(g, mem)
        assert torch.equal(out.global_history, g_h)
        assert torch.equal(out.global_updated, msim.update_global_with_locals(g_h, locals5))


class TestGradients:
    def test_history_update_matches_finite_differences(self):
        torch.manual_seed(11)
        msim = make_msim().double().eval()
        gen = torch.Generator().manual_seed(17)
        randomize_out_projections(msim, gen)
        g = torch.randn(32, 4, 4, dtype=torch.float64)
        mem = torch.randn(18, 24, dtype=torch.float64)
        probe = torch.randn(32, 4, 4, dtype=torch.float64)
        params = [msim.attn_history.to_q.weight, msim.attn_history.to_out.weight,
                  msim.attn_history.to_v.weight]

        def scalar():
            return (msim.update_global_with_history(g, mem) * probe).sum()

        finite_difference_check(scalar, params, rel_tol=1e-4)

    def test_local_update_query_projection_gradient(self):
        torch.manual_seed(12)
        msim = make_msim().double().eval()
        gen = torch.Generator().manual_seed(18)
        randomize_out_projections(msim, gen)
        g = torch.randn(32, 2, 2, dtype=torch.float64)
        locals5 = [torch.randn(32, 2, 2, dtype=torch.float64) for _ in range(4)]
        probe = [torch.randn(32, 2, 2, dtype=torch.float64) for _ in range(4)]
        params = [msim.attn_global_to_local.to_q.weight]

        def scalar():
            outs = msim.update_locals(locals5, g)
            return sum((o * p).sum() for o, p in zip(outs, probe))

        finite_difference_check(scalar, params, rel_tol=1e-4)
