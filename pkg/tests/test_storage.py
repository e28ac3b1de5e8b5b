"""Tests for JSON persistence of episodes and checkpoints."""

import json
from pathlib import Path

import numpy as np
import pytest

from src.hmmprior import Branch
from src.model import SahmmVae, TrainConfig
from src.storage import (
    load_checkpoint,
    load_episode,
    mixing_from_dict,
    mixing_to_dict,
    save_checkpoint,
    save_episode,
    save_prior_snapshots,
    source_spec_from_dict,
    source_spec_to_dict,
)
from src.synthgen import MixingSpec, SpecError, default_episode, default_source_specs, make_rng


def _config(epochs: int) -> TrainConfig:
    return TrainConfig(
        branch=Branch.MSAR,
        epochs=epochs,
        seed=4,
        encoder_hidden=(4,),
        log_every=1,
        learning_rate=1e-2,
    )


class TestEpisodeFiles:
    """Test episode save and load."""

    def test_arrays_survive_exactly(self, tmp_path: Path) -> None:
        """Every array and the fingerprint come back bit-identical."""
        episode = default_episode(Branch.STATE_FLOW, T=40, seed=11)
        loaded = load_episode(save_episode(episode, tmp_path / "episode.json"))
        assert np.array_equal(loaded.sources, episode.sources)
        assert np.array_equal(loaded.states, episode.states)
        assert np.array_equal(loaded.observations, episode.observations)
        assert loaded.seed == 11
        assert loaded.fingerprint() == episode.fingerprint()

    def test_creates_parent_directories(self, tmp_path: Path) -> None:
        """Nested output paths are created on demand."""
        path = save_episode(default_episode(Branch.GAUSSIAN, T=5, seed=0), tmp_path / "a" / "b.json")
        assert path.exists()

    def test_missing_field(self, tmp_path: Path) -> None:
        """An episode file without observations is a SpecError."""
        path = save_episode(default_episode(Branch.GAUSSIAN, T=5, seed=0), tmp_path / "e.json")
        record = json.loads(path.read_text())
        del record["observations"]
        path.write_text(json.dumps(record))
        with pytest.raises(SpecError, match="observations"):
            load_episode(path)


class TestSpecRecords:
    """Test source-spec and mixing records."""

    def test_source_spec_record(self) -> None:
        """A spec record names its branch by label and keeps only the fields it has."""
        spec = default_source_specs(Branch.MSAR, 1)[0]
        record = source_spec_to_dict(spec)
        assert record["branch"] == Branch.MSAR.label
        assert "flow_skew" not in record
        restored = source_spec_from_dict(record)
        assert np.array_equal(restored.ar_coefs, spec.ar_coefs)

    def test_invalid_transition_record(self) -> None:
        """Transition rows that do not sum to one are reported."""
        record = source_spec_to_dict(default_source_specs(Branch.GAUSSIAN, 1)[0])
        record["transition"] = [[0.5, 0.4], [0.1, 0.9]]
        with pytest.raises(SpecError, match="transition rows"):
            source_spec_from_dict(record)

    def test_missing_branch(self) -> None:
        """A record without a branch is a SpecError."""
        with pytest.raises(SpecError):
            source_spec_from_dict({"initial": [1.0], "transition": [[1.0]]})

    def test_mlp_weights_are_kept(self) -> None:
        """Stored MLP mixing weights are reused rather than redrawn."""
        mixing = MixingSpec.mlp(2, 3, make_rng(0), noise_std=0.0)
        restored = mixing_from_dict(mixing_to_dict(mixing))
        S = make_rng(1).normal(size=(6, 2))
        assert np.array_equal(restored.apply(S), mixing.apply(S))

    def test_mlp_without_weights_needs_generator(self) -> None:
        """Drawing fresh MLP weights requires a generator."""
        with pytest.raises(SpecError):
            mixing_from_dict({"kind": "mlp", "num_sources": 2})

    def test_unknown_kind(self) -> None:
        """Only linear and mlp mixing are recognised."""
        with pytest.raises(SpecError, match="unknown mixing kind"):
            mixing_from_dict({"kind": "cubic"})


class TestCheckpoints:
    """Test checkpoint save and resume."""

    def test_resume_matches_uninterrupted_run(self, tmp_path: Path) -> None:
        """Training 2 + 10 epochs through a checkpoint equals training 12 epochs straight."""
        episode = default_episode(Branch.MSAR, T=25, seed=2)
        straight = SahmmVae(_config(12), 2, 2)
        straight.fit(episode)

        first = SahmmVae(_config(12), 2, 2)
        first.fit(episode, epochs=2)
        path = save_checkpoint(first, tmp_path / "checkpoint.json")

        resumed = load_checkpoint(SahmmVae(_config(12), 2, 2), path)
        assert resumed.epoch == 2
        resumed.fit(episode)
        assert resumed.epoch == straight.epoch == 12
        for name, tensor in straight.params.tensors().items():
            assert np.array_equal(resumed.params.tensors()[name].value, tensor.value), name

    def test_missing_parameters(self, tmp_path: Path) -> None:
        """A checkpoint from a different architecture is rejected."""
        path = save_checkpoint(SahmmVae(_config(1), 2, 2), tmp_path / "checkpoint.json")
        wider = SahmmVae(TrainConfig(branch=Branch.MSAR, encoder_hidden=(4, 4)), 2, 2)
        with pytest.raises(ValueError, match="missing parameters"):
            load_checkpoint(wider, path)

    def test_prior_snapshots(self, tmp_path: Path) -> None:
        """Snapshots list pi and A for every source of every logged epoch."""
        model = SahmmVae(_config(2), 2, 2)
        report = model.fit(default_episode(Branch.MSAR, T=20, seed=3))
        path = save_prior_snapshots(report.records, tmp_path / "prior_snapshots.json")
        snapshots = json.loads(path.read_text())["snapshots"]
        assert [s["epoch"] for s in snapshots] == [0, 1]
        for source in snapshots[-1]["sources"]:
            assert np.allclose(np.sum(source["A"], axis=1), 1.0)
            assert abs(sum(source["pi"]) - 1.0) < 1e-12
