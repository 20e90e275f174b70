"""Memory bank: compression schedule, token counts, ordering, reset."""

import pytest
import torch

from hrvvs.memory import MemoryBank, MemoryContractError


def stage5(value: float | None = None, side: int = 8, channels: int = 4) -> torch.Tensor:
    if value is None:
        return torch.randn(channels, side, side)
    return torch.full((channels, side, side), value)


class TestPush:
    def test_below_capacity_uncompressed(self):
        bank = MemoryBank(capacity=4)
        for t in range(4):
            bank.push({5: stage5()}, t)
        assert len(bank) == 4
        assert all(e.factor == 1 for e in bank.entries)

    def test_overflow_triggers_age_schedule(self):
        bank = MemoryBank(capacity=4)
        for t in range(5):
            bank.push({5: stage5()}, t)
        assert len(bank) == 4
        assert [e.frame_index for e in bank.entries] == [1, 2, 3, 4]
        assert [e.factor for e in bank.entries] == [8, 4, 2, 1]

    def test_duplicate_frame_index_rejected(self):
        bank = MemoryBank(capacity=4)
        bank.push({5: stage5()}, 0)
        with pytest.raises(MemoryContractError):
            bank.push({5: stage5()}, 0)

    def test_non_monotone_rejected(self):
        bank = MemoryBank(capacity=4)
        bank.push({5: stage5()}, 3)
        with pytest.raises(MemoryContractError):
            bank.push({5: stage5()}, 2)


class TestCompress:
    def test_token_counts_85(self):
        bank = MemoryBank(capacity=4)
        for t in range(5):
            bank.push({5: stage5()}, t)
        counts = [e.token_count() for e in bank.entries]
        assert counts == [1, 4, 16, 64]
        assert bank.token_count() == 85

    def test_idempotent(self):
        bank = MemoryBank(capacity=4)
        for t in range(5):
            bank.push({5: stage5()}, t)
        snapshot = [e.features[5].clone() for e in bank.entries]
        bank.compress()
        for before, entry in zip(snapshot, bank.entries):
            assert torch.equal(before, entry.features[5])

    def test_constant_features_survive_pooling(self):
        bank = MemoryBank(capacity=2)
        for t in range(4):
            bank.push({5: stage5(value=0.37)}, t)
        for entry in bank.entries:
            assert torch.allclose(entry.features[5], torch.full_like(entry.features[5], 0.37))

    def test_factor_never_decreases(self):
        bank = MemoryBank(capacity=3)
        for t in range(10):
            bank.push({5: stage5()}, t)
            factors = {e.frame_index: e.factor for e in bank.entries}
            if t >= 3:
                ordered = [factors[k] for k in sorted(factors)]
                assert ordered == sorted(ordered, reverse=True)


class TestTokenCountFormula:
    @pytest.mark.parametrize("capacity", [2, 4, 8])
    def test_exact_formula(self, capacity):
        bank = MemoryBank(capacity=capacity)
        for t in range(capacity + 3):
            bank.push({5: stage5()}, t)
        assert bank.token_count() == bank.expected_token_count((8, 8), capacity + 3)

    def test_default_schedule_bound(self):
        bank = MemoryBank(capacity=4)
        for t in range(20):
            bank.push({5: stage5()}, t)
        t0 = 64
        assert bank.token_count() == t0 + t0 // 4 + t0 // 16 + t0 // 64
        assert bank.token_count() < (4 / 3) * t0

    def test_older_entries_never_have_more_tokens(self):
        bank = MemoryBank(capacity=6)
        for t in range(9):
            bank.push({5: stage5()}, t)
        counts = [e.token_count() for e in bank.entries]  # oldest -> newest
        assert counts == sorted(counts)


class TestTokens:
    def test_empty_bank(self):
        bank = MemoryBank(capacity=4)
        toks = bank.tokens()
        assert toks.shape[0] == 0

    def test_token_dim_and_count(self):
        bank = MemoryBank(capacity=4, pe_dim=16)
        for t in range(5):
            bank.push({5: stage5(channels=6)}, t)
        toks = bank.tokens()
        assert toks.shape == (85, 6 + 16)

    def test_deterministic(self):
        bank = MemoryBank(capacity=4)
        for t in range(5):
            bank.push({5: stage5()}, t)
        assert torch.equal(bank.tokens(), bank.tokens())

    def test_ordering_oldest_first(self):
        bank = MemoryBank(capacity=2)
        bank.push({5: stage5(value=1.0, side=2)}, 0)
        bank.push({5: stage5(value=2.0, side=2)}, 1)
        toks = bank.tokens()
        channels = 4
        assert torch.allclose(toks[:4, :channels], torch.ones(4, channels))
        assert torch.allclose(toks[4:, :channels], 2 * torch.ones(4, channels))

    def test_multi_stage_padding(self):
        bank = MemoryBank(capacity=2, stages=(4, 5))
        bank.push({4: torch.randn(2, 4, 4), 5: torch.randn(6, 2, 2)}, 0)
        toks = bank.tokens()
        assert toks.shape == (16 + 4, 6 + 16)
        # stage-4 tokens are zero-padded up to the widest channel count
        assert torch.equal(toks[:16, 2:6], torch.zeros(16, 4))


class TestPreviousGlobal:
    def test_fresh_bank_absent(self):
        assert MemoryBank(capacity=4).previous_global() is None

    def test_single_push_identity(self):
        bank = MemoryBank(capacity=4)
        x = torch.randn(4, 8, 8)
        bank.push({5: stage5()}, 0, decoder_global=x)
        assert torch.equal(bank.previous_global(), x)

    def test_latest_wins(self):
        bank = MemoryBank(capacity=4)
        x, y = torch.randn(4, 8, 8), torch.randn(4, 8, 8)
        bank.push({5: stage5()}, 0, decoder_global=x)
        bank.push({5: stage5()}, 1, decoder_global=y)
        assert torch.equal(bank.previous_global(), y)


class TestReset:
    def test_reset_clears_everything(self):
        bank = MemoryBank(capacity=4)
        for t in range(5):
            bank.push({5: stage5()}, t, decoder_global=stage5())
        bank.reset()
        assert bank.previous_global() is None
        assert bank.tokens().shape[0] == 0
        bank.reset()  # idempotent
        assert len(bank) == 0
        bank.push({5: stage5()}, 0)  # t=0 valid again after reset
        assert len(bank) == 1
