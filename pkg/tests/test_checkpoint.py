"""Checkpoint archive: byte-identical round trips, optimizer state, config."""

import numpy as np
import pytest
import torch

from hrvvs.checkpoint import (
    CheckpointError,
    adam_state_to_arrays,
    arrays_to_adam_state,
    load_checkpoint,
    save_checkpoint,
)
from hrvvs.config import ConfigError, RunConfig, desk_profile, paper_profile


def small_state() -> dict[str, torch.Tensor]:
    gen = torch.Generator().manual_seed(0)
    return {
        "layer.weight": torch.randn(4, 3, generator=gen),
        "layer.bias": torch.randn(4, generator=gen),
        "buffer.index": torch.arange(5),
    }


class TestRoundTrip:
    def test_save_load_save_byte_identical(self, tmp_path):
        cfg = desk_profile()
        p1, p2 = tmp_path / "a.zip", tmp_path / "b.zip"
        save_checkpoint(p1, small_state(), cfg, step=7)
        payload = load_checkpoint(p1)
        save_checkpoint(
            p2, payload["model_state"], payload["config"], payload["step"],
            optimizer_state=payload["optimizer_state"],
        )
        assert p1.read_bytes() == p2.read_bytes()

    def test_values_preserved(self, tmp_path):
        state = small_state()
        save_checkpoint(tmp_path / "c.zip", state, desk_profile(), step=3)
        loaded = load_checkpoint(tmp_path / "c.zip")
        assert loaded["step"] == 3
        for k, v in state.items():
            assert torch.equal(loaded["model_state"][k], v)

    def test_config_survives(self, tmp_path):
        cfg = desk_profile(seed=123, no_msim=True)
        save_checkpoint(tmp_path / "d.zip", small_state(), cfg, step=0)
        loaded_cfg = load_checkpoint(tmp_path / "d.zip")["config"]
        assert loaded_cfg.seed == 123 and loaded_cfg.no_msim is True
        assert loaded_cfg.resolution == cfg.resolution

    def test_optimizer_state_round_trip(self, tmp_path):
        torch.manual_seed(1)
        lin = torch.nn.Linear(3, 2)
        opt = torch.optim.Adam(lin.parameters(), lr=1e-3)
        lin(torch.randn(4, 3)).sum().backward()
        opt.step()
        named = list(lin.named_parameters())
        arrays = adam_state_to_arrays(opt, named)
        save_checkpoint(tmp_path / "e.zip", dict(named), desk_profile(), 1, optimizer_state=arrays)
        loaded = load_checkpoint(tmp_path / "e.zip")

        lin2 = torch.nn.Linear(3, 2)
        opt2 = torch.optim.Adam(lin2.parameters(), lr=1e-3)
        arrays_to_adam_state(opt2, list(lin2.named_parameters()), loaded["optimizer_state"])
        m1 = opt.state[named[0][1]]["exp_avg"]
        m2 = opt2.state[list(lin2.named_parameters())[0][1]]["exp_avg"]
        assert torch.allclose(m1, m2)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nope.zip")


class TestRunConfig:
    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown"):
            RunConfig.from_dict({"learning_rate": 1.0, "bogus_key": 2})

    def test_round_trip_via_file(self, tmp_path):
        cfg = desk_profile(epochs=9)
        cfg.save(tmp_path / "cfg.json")
        loaded = RunConfig.from_file(tmp_path / "cfg.json")
        assert loaded == cfg

    def test_resolution_stride_validated(self):
        with pytest.raises(ConfigError):
            RunConfig(resolution=(100, 128))

    def test_paper_profile_records_published_recipe(self):
        cfg = paper_profile()
        assert cfg.epochs == 15
        assert cfg.batch_size == 32
        assert cfg.learning_rate == pytest.approx(1e-5)
        assert cfg.lr_decay_power == pytest.approx(0.9)
        assert cfg.resolution[0] % 64 == 0 and cfg.resolution[1] % 64 == 0

    def test_invalid_json_rejected(self, tmp_path):
        (tmp_path / "bad.json").write_text("{not json")
        with pytest.raises(ConfigError):
            RunConfig.from_file(tmp_path / "bad.json")

    def test_delta_bounds(self):
        with pytest.raises(ConfigError):
            RunConfig(delta=1.0)
