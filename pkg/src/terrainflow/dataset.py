"""Dataset emission from a trained sampler, random baselines, summaries and validation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .heightmap import read_terrain, write_terrain
from .mdp import State, feasible_add_ids, point_from_id
from .scoring import RewardSpec, ScoreWeights, reward_from_beta, score
from .terrain_gen import TerrainGenerator
from .trainer import SamplerConfig, TerrainReward, sample_trajectory

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
BETA_TOLERANCE = 1e-9


@dataclass
class DatasetManifest:
    generator_id: str
    reward_spec: dict
    entries: list[dict] = field(default_factory=list)
    format_version: int = MANIFEST_VERSION
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "generator_id": self.generator_id,
            "reward_spec": self.reward_spec,
            **self.extra,
            "entries": self.entries,
        }

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> DatasetManifest:
        d = json.loads(Path(path).read_text())
        known = {"format_version", "generator_id", "reward_spec", "entries"}
        if d.get("format_version") != MANIFEST_VERSION:
            raise ValueError(f"{path}: unsupported manifest version {d.get('format_version')!r}")
        return cls(
            d["generator_id"],
            d["reward_spec"],
            d["entries"],
            d["format_version"],
            {k: v for k, v in d.items() if k not in known},
        )


def _check_writable(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    probe = out / ".write-probe"
    probe.write_bytes(b"")
    probe.unlink()


def sample_dataset(
    params,
    generator: TerrainGenerator,
    spec: RewardSpec,
    n: int,
    out_dir: str | Path,
    seed: int = 0,
    cfg: SamplerConfig = SamplerConfig(),
    weights: ScoreWeights = ScoreWeights(),
) -> DatasetManifest:
    """Sample ``n`` terrains without exploration and write them with a manifest.

    Recorded scores come from re-reading the stored float32 terrain, so
    rescoring a file always reproduces its manifest entry.
    """
    out = Path(out_dir)
    _check_writable(out)
    reward = TerrainReward(generator, spec, weights, cfg.generator_seed)
    manifest = DatasetManifest(
        generator.generator_id,
        spec.to_dict(),
        extra={"seed": seed, "score_weights": weights.__dict__.copy()},
    )
    first_seen: dict[str, str] = {}
    for i in range(n):
        traj = sample_trajectory(params, reward, np.random.default_rng([seed, i]), cfg, explore_prob=0.0)
        s = traj.terminal
        entry_id = f"{i:05d}"
        name = f"terrain_{entry_id}.trb"
        write_terrain(reward.heightmap(s), out / name)
        beta = score(read_terrain(out / name), weights)
        entry = {
            "id": entry_id,
            "terrain": name,
            "beta": beta,
            "reward": reward_from_beta(beta, spec),
            "length": s.card,
            "control_points": s.triples(),
            "generator_seed": reward.evaluate(s).seed,
            "state_digest": s.digest,
            "duplicate_of": first_seen.get(s.digest),
        }
        first_seen.setdefault(s.digest, entry_id)
        sidecar = {k: entry[k] for k in ("id", "beta", "reward", "length", "control_points", "generator_seed", "state_digest")}
        sidecar["generator_id"] = generator.generator_id
        (out / name).with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True, indent=1) + "\n")
        manifest.entries.append(entry)
    manifest.write(out / MANIFEST_NAME)
    return manifest


def random_state_by_actions(rng: np.random.Generator, length: int, grid: int, max_points: int) -> State:
    """Terminal state of a trajectory of ``length`` uniformly random AddPoint actions."""
    s = State((), grid, max_points)
    for _ in range(length):
        ids = feasible_add_ids(s)
        s = s.with_point(point_from_id(int(ids[rng.integers(len(ids))]), grid))
    return s


def random_baseline(
    length: int,
    n: int,
    generator: TerrainGenerator,
    spec: RewardSpec,
    seed: int = 0,
    weights: ScoreWeights = ScoreWeights(),
    cfg: SamplerConfig = SamplerConfig(),
) -> list[float]:
    """Scores of ``n`` terrains from uniformly random trajectories of exactly ``length`` points."""
    if not 0 <= length <= cfg.max_points:
        raise ValueError(f"length must lie in [0, {cfg.max_points}]")
    reward = TerrainReward(generator, spec, weights, cfg.generator_seed)
    return [
        reward.evaluate(random_state_by_actions(np.random.default_rng([seed, length, i]), length, cfg.grid, cfg.max_points)).beta
        for i in range(n)
    ]


def stats(manifest: DatasetManifest, bins: int = 10) -> dict:
    betas = np.array([e["beta"] for e in manifest.entries], dtype=np.float64)
    lengths = [int(e["length"]) for e in manifest.entries]
    out: dict = {
        "n": len(betas),
        "distinct_lengths": len(set(lengths)),
        "distinct_states": len({e["state_digest"] for e in manifest.entries}),
        "duplicates": sum(e.get("duplicate_of") is not None for e in manifest.entries),
        "length_histogram": {str(k): lengths.count(k) for k in sorted(set(lengths))},
    }
    if len(betas):
        q25, q50, q75 = np.percentile(betas, [25, 50, 75])
        counts, edges = np.histogram(betas, bins=bins)
        out.update(
            beta_median=float(q50),
            beta_iqr=[float(q25), float(q75)],
            beta_histogram={"counts": counts.tolist(), "edges": edges.tolist()},
        )
    return out


def write_scatter_csv(manifest: DatasetManifest, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["length", "beta"])
        for e in manifest.entries:
            w.writerow([e["length"], repr(e["beta"])])


def validate(manifest_path: str | Path) -> list[str]:
    """Problems found in a dataset directory; empty when every entry checks out."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    manifest = DatasetManifest.read(manifest_path)
    weights = ScoreWeights(**manifest.extra.get("score_weights", {}))
    problems = []
    ids = [e["id"] for e in manifest.entries]
    if len(ids) != len(set(ids)):
        problems.append("duplicate entry ids")
    for e in manifest.entries:
        path = root / e["terrain"]
        if not path.exists():
            problems.append(f"{e['id']}: missing {e['terrain']}")
            continue
        try:
            beta = score(read_terrain(path), weights)
        except ValueError as exc:
            problems.append(f"{e['id']}: unreadable terrain ({exc})")
            continue
        if not math.isclose(beta, e["beta"], rel_tol=0.0, abs_tol=BETA_TOLERANCE):
            problems.append(f"{e['id']}: beta {beta!r} does not match recorded {e['beta']!r}")
    return problems
