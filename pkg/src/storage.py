"""JSON persistence for episodes, training checkpoints and prior-parameter snapshots."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any

import numpy as np

from src.hmmprior import Branch
from src.model import EpochRecord, SahmmVae
from src.synthgen import EpisodeData, MixingSpec, SourceSpec, SpecError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
_SPEC_ARRAYS = (
    "means",
    "variances",
    "init_means",
    "init_variances",
    "ar_coefs",
    "scales",
    "flow_skew",
    "flow_tail",
)


def _to_jsonable(value: Any) -> Any:
    """Arrays become nested lists; float repr round-trips every float64 exactly."""
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, dict):
        return {str(k): _to_jsonable(v) for k, v in value.items()}
    if isinstance(value, list | tuple):
        return [_to_jsonable(v) for v in value]
    return value


def _write_json(path: str | Path, payload: dict[str, Any], allow_nan: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_to_jsonable(payload), indent=1, allow_nan=allow_nan) + "\n")
    return path


def source_spec_to_dict(spec: SourceSpec) -> dict[str, Any]:
    record: dict[str, Any] = {
        "branch": spec.branch.label,
        "initial": spec.initial,
        "transition": spec.transition,
    }
    for name in _SPEC_ARRAYS:
        value = getattr(spec, name)
        if value is not None:
            record[name] = value
    return _to_jsonable(record)


def source_spec_from_dict(record: dict[str, Any]) -> SourceSpec:
    try:
        arrays = {
            name: np.asarray(record[name], dtype=np.float64)
            for name in _SPEC_ARRAYS
            if record.get(name) is not None
        }
        spec = SourceSpec(
            branch=Branch.parse(record["branch"]),
            initial=np.asarray(record["initial"], dtype=np.float64),
            transition=np.asarray(record["transition"], dtype=np.float64),
            **arrays,
        )
    except (KeyError, ValueError, TypeError) as e:
        raise SpecError(f"Invalid source spec record: {e}") from e
    spec.validate()
    return spec


def mixing_to_dict(mixing: MixingSpec) -> dict[str, Any]:
    return _to_jsonable(
        {
            "kind": mixing.kind,
            "num_sources": mixing.num_sources,
            "num_observations": mixing.num_observations,
            "noise_std": mixing.noise_std,
            "matrix": mixing.matrix,
            "weights": mixing.weights,
        }
    )


def mixing_from_dict(
    record: dict[str, Any], num_sources: int | None = None, rng: np.random.Generator | None = None
) -> MixingSpec:
    """Rebuild a mixing map; an ``mlp`` record without weights draws them from ``rng``."""
    kind = record.get("kind", "linear")
    noise_std = float(record.get("noise_std", 0.0))
    try:
        if kind == "linear":
            return MixingSpec.linear(np.asarray(record["matrix"], dtype=np.float64), noise_std)
        if kind == "mlp" and record.get("weights"):
            spec = MixingSpec(
                "mlp",
                int(record["num_sources"]),
                int(record["num_observations"]),
                noise_std,
                weights={k: np.asarray(v, dtype=np.float64) for k, v in record["weights"].items()},
            )
            spec.validate()
            return spec
        if kind == "mlp":
            if rng is None:
                raise SpecError("mlp mixing without stored weights needs a generator")
            n = int(record.get("num_sources", num_sources or 0))
            m = int(record.get("num_observations", n))
            return MixingSpec.mlp(n, m, rng, noise_std)
    except (KeyError, TypeError) as e:
        raise SpecError(f"Invalid mixing record: {e}") from e
    raise SpecError(f"unknown mixing kind {kind!r}")


def save_episode(episode: EpisodeData, path: str | Path) -> Path:
    """Write specs, seed and every episode array to one JSON file."""
    payload = {
        "format_version": FORMAT_VERSION,
        "seed": episode.seed,
        "T": episode.T,
        "source_specs": [source_spec_to_dict(s) for s in episode.source_specs],
        "mixing": mixing_to_dict(episode.mixing),
        "sources": episode.sources,
        "states": episode.states,
        "observations": episode.observations,
    }
    written = _write_json(path, payload)
    logger.info(f"Saved episode ({episode.T} steps) to {written}")
    return written


def load_episode(path: str | Path) -> EpisodeData:
    record = json.loads(Path(path).read_text())
    try:
        return EpisodeData(
            T=int(record["T"]),
            sources=np.asarray(record["sources"], dtype=np.float64),
            states=np.asarray(record["states"], dtype=np.int64),
            observations=np.asarray(record["observations"], dtype=np.float64),
            source_specs=[source_spec_from_dict(s) for s in record["source_specs"]],
            mixing=mixing_from_dict(record["mixing"]),
            seed=int(record["seed"]),
        )
    except KeyError as e:
        raise SpecError(f"episode file {path} is missing {e}") from e


def save_checkpoint(model: SahmmVae, path: str | Path) -> Path:
    payload = {"format_version": FORMAT_VERSION, **model.state_dict()}
    written = _write_json(path, payload)
    logger.info(f"Saved checkpoint at epoch {model.epoch} to {written}")
    return written


def load_checkpoint(model: SahmmVae, path: str | Path) -> SahmmVae:
    """Restore parameters, optimiser moments, epoch and noise stream into ``model``."""
    model.load_state_dict(json.loads(Path(path).read_text()))
    return model


def save_prior_snapshots(records: list[EpochRecord], path: str | Path) -> Path:
    """Per logged epoch: pi, A and the branch payload in natural units for every source."""
    payload = {
        "format_version": FORMAT_VERSION,
        "snapshots": [
            {
                "epoch": record.epoch,
                "posterior_variances": record.posterior_variances,
                "sources": record.prior_snapshot,
            }
            for record in records
        ],
    }
    return _write_json(path, payload)


def write_json(path: str | Path, payload: dict[str, Any], allow_nan: bool = False) -> Path:
    """Write a diagnostic payload; ``allow_nan`` keeps NaN/Infinity tokens from a diverged run."""
    return _write_json(path, payload, allow_nan=allow_nan)
