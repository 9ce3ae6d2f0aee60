import json

import numpy as np
import pytest

from guidedcontrast.checkpoint import (
    BLOB,
    CheckpointError,
    MANIFEST,
    OPTIM,
    load_checkpoint,
    load_optimizer_state,
    read_manifest,
    save_checkpoint,
)
from guidedcontrast.config import ConfigError, TrainConfig, dump_config, load_config
from guidedcontrast.encoder import init_params


class TestConfig:
    def test_defaults_validate(self):
        cfg = TrainConfig().validate()
        assert cfg.epochs == cfg.optim.cycles * cfg.optim.epochs_per_cycle

    def test_round_trip(self, tmp_path):
        cfg = TrainConfig().with_overrides({"seed": 7, "ga.n_candidates": 4, "augment.crop_fraction": 0.2})
        dump_config(cfg, tmp_path / "c.json")
        back = load_config(tmp_path / "c.json")
        assert back == cfg
        assert back.to_dict() == json.loads((tmp_path / "c.json").read_text())

    def test_partial_document_uses_defaults(self, tmp_path):
        (tmp_path / "c.json").write_text('{"optim": {"cycles": 1}}')
        cfg = load_config(tmp_path / "c.json")
        assert cfg.optim.cycles == 1 and cfg.optim.epochs_per_cycle == TrainConfig().optim.epochs_per_cycle

    @pytest.mark.parametrize(
        "overrides",
        [
            {"nope": 1},
            {"optim.nope": 1},
            {"seed.x": 1},
            {"batch_size": 0},
            {"tau": -1.0},
            {"optim.cycles": -1},
            {"point_budget": 0},
            {"corpus.kinds": ["sphere"]},
            {"corpus.kinds": ["sphere", "torus"]},
            {"augment.scale": [2.0, 1.0]},
        ],
    )
    def test_rejects(self, overrides):
        with pytest.raises(ConfigError):
            TrainConfig().with_overrides(overrides)

    def test_invalid_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "c.json")

    def test_shipped_benchmark_config_loads(self):
        from pathlib import Path

        cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "toy_benchmark.json")
        assert cfg.optim.kind == "adam" and cfg.probe.per_class == 128


class TestCheckpoint:
    def _params(self):
        return init_params((3, 8, 4), (4, 3), seed=2)

    def test_round_trip_bitwise(self, tmp_path):
        p = self._params()
        state = np.random.default_rng(0).normal(size=5)
        save_checkpoint(tmp_path, p, seed=3, epoch=2, step=9, bank_records=[[0.1, 0.2]], optimizer_state=state)
        q, bank, manifest = load_checkpoint(tmp_path)
        assert q.flat().tobytes() == p.flat().tobytes()
        assert bank == [[0.1, 0.2]]
        assert manifest["epoch"] == 2 and manifest["step"] == 9 and manifest["seed"] == 3
        assert load_optimizer_state(tmp_path).tobytes() == state.tobytes()

    def test_bytes_identical_on_resave(self, tmp_path):
        p = self._params()
        save_checkpoint(tmp_path / "a", p, seed=0)
        save_checkpoint(tmp_path / "b", p, seed=0)
        for name in (BLOB, MANIFEST):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_no_optional_parts(self, tmp_path):
        save_checkpoint(tmp_path, self._params(), seed=0)
        assert load_checkpoint(tmp_path)[1] is None
        assert load_optimizer_state(tmp_path) is None

    def test_truncated_blob(self, tmp_path):
        save_checkpoint(tmp_path, self._params(), seed=0)
        blob = tmp_path / BLOB
        blob.write_bytes(blob.read_bytes()[:-8])
        with pytest.raises(CheckpointError, match="corrupt"):
            load_checkpoint(tmp_path)

    def test_non_finite_blob(self, tmp_path):
        p = self._params()
        save_checkpoint(tmp_path, p, seed=0)
        flat = p.flat()
        flat[0] = np.nan
        (tmp_path / BLOB).write_bytes(flat.astype("<f8").tobytes())
        with pytest.raises(CheckpointError, match="non-finite"):
            load_checkpoint(tmp_path)

    def test_corrupt_optimizer_state(self, tmp_path):
        save_checkpoint(tmp_path, self._params(), seed=0, optimizer_state=np.zeros(3))
        (tmp_path / OPTIM).write_bytes(b"\0" * 7)
        with pytest.raises(CheckpointError):
            load_optimizer_state(tmp_path)

    def test_manifest_diff_names_keys(self, tmp_path):
        save_checkpoint(tmp_path, self._params(), seed=0)
        with pytest.raises(CheckpointError) as info:
            load_checkpoint(tmp_path, expect={"trunk": (3, 64, 64), "pooling": "max", "seed": 1})
        msg = str(info.value)
        assert "trunk" in msg and "seed" in msg and "pooling" not in msg

    def test_missing_and_foreign_manifest(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            read_manifest(tmp_path)
        (tmp_path / MANIFEST).write_text('{"format": "other"}')
        with pytest.raises(CheckpointError):
            read_manifest(tmp_path)

    def test_version_mismatch(self, tmp_path):
        save_checkpoint(tmp_path, self._params(), seed=0)
        m = json.loads((tmp_path / MANIFEST).read_text())
        m["version"] = 99
        (tmp_path / MANIFEST).write_text(json.dumps(m))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(tmp_path)
