"""Command-line entry point: ``terrainflow <subcommand> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .dataset import (
    MANIFEST_NAME,
    DatasetManifest,
    random_baseline,
    sample_dataset,
    stats,
    validate,
    write_scatter_csv,
)
from .flow_model import load_checkpoint
from .heightmap import export_pgm, read_terrain
from .scoring import RewardSpec, ScoreWeights, reward_from_beta, score_terms
from .terrain_gen import GeneratorConfig, ProceduralGenerator
from .trainer import SamplerConfig, TerrainReward, best_checkpoint, train

TASK_OUTPUT_BIAS = {"hard": 0.0, "medium": -6.0}


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class RunConfig:
    sampler: SamplerConfig
    generator: GeneratorConfig
    weights: ScoreWeights
    target_beta: float

    def to_dict(self) -> dict:
        return {
            "sampler": self.sampler.to_dict(),
            "generator": self.generator.to_dict(),
            "weights": dataclasses.asdict(self.weights),
            "target_beta": self.target_beta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        return cls(
            SamplerConfig(**d["sampler"]),
            GeneratorConfig(**d["generator"]),
            ScoreWeights(**d["weights"]),
            d["target_beta"],
        )

    def spec(self, task: str) -> RewardSpec:
        return RewardSpec.hard() if task == "hard" else RewardSpec.medium(self.target_beta)


def _field_names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def load_config(path: str | Path | None, task: str = "hard", seed: int | None = None) -> RunConfig:
    """Split a flat JSON object into sampler, generator and score settings.

    Keys must be field names of SamplerConfig, GeneratorConfig or
    ScoreWeights, or ``target_beta``; anything else is rejected.
    """
    flat = {}
    if path is not None:
        flat = json.loads(Path(path).read_text())
        if not isinstance(flat, dict):
            raise ConfigError("config must be a JSON object")
    groups: dict[str, dict] = {"sampler": {}, "generator": {}, "weights": {}}
    owners = {"sampler": _field_names(SamplerConfig), "generator": _field_names(GeneratorConfig), "weights": _field_names(ScoreWeights)}
    target_beta = RewardSpec.medium().target_beta
    unknown = []
    for key, value in flat.items():
        if key == "target_beta":
            target_beta = float(value)
            continue
        for group, names in owners.items():
            if key in names:
                groups[group][key] = value
                break
        else:
            unknown.append(key)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    groups["sampler"].setdefault("output_bias", TASK_OUTPUT_BIAS[task])
    if seed is not None:
        groups["sampler"]["seed"] = seed
    try:
        return RunConfig(
            SamplerConfig(**groups["sampler"]),
            GeneratorConfig(**groups["generator"]),
            ScoreWeights(**groups["weights"]),
            target_beta,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _print(obj) -> None:
    print(json.dumps(obj, sort_keys=True, indent=1))


def cmd_train(args) -> int:
    run = load_config(args.config, args.task, args.seed)
    spec = run.spec(args.task)
    reward = TerrainReward(ProceduralGenerator(run.generator), spec, run.weights, run.sampler.generator_seed)
    out = Path(args.out)
    meta = {"task": args.task, "config": run.to_dict()}
    _, log = train(run.sampler, reward, out_dir=out, checkpoint_meta=meta)
    (out / "config.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    best = best_checkpoint(log, spec)
    summary = {"samples": len(log.records), "final": "final.tfck", "best": best[1] if best else None}
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    _print(summary)
    return 0


def cmd_sample(args) -> int:
    params, meta = load_checkpoint(args.checkpoint)
    if "config" not in meta:
        raise ConfigError(f"{args.checkpoint}: checkpoint carries no run config")
    run = RunConfig.from_dict(meta["config"])
    spec = run.spec(meta.get("task", "hard"))
    manifest = sample_dataset(
        params, ProceduralGenerator(run.generator), spec, args.n, args.out, args.seed, run.sampler, run.weights
    )
    _print(stats(manifest))
    return 0


def cmd_score(args) -> int:
    h = read_terrain(args.terrain)
    weights = load_config(args.config).weights
    terms = score_terms(h, weights)
    beta = float(sum(terms))
    _print(
        {
            "beta": beta,
            "terms": dict(zip(("edges", "slopes", "roughness"), terms)),
            "reward_hard": reward_from_beta(beta, RewardSpec.hard()),
            "reward_medium": reward_from_beta(beta, RewardSpec.medium()),
        }
    )
    return 0


def cmd_baseline(args) -> int:
    run = load_config(args.config, args.task)
    betas = random_baseline(
        args.length, args.n, ProceduralGenerator(run.generator), run.spec(args.task), args.seed, run.weights, run.sampler
    )
    _print({"length": args.length, "n": args.n, "median": float(np.median(betas)) if betas else None, "betas": betas})
    return 0


def cmd_export_pgm(args) -> int:
    src = Path(args.terrain)
    dst = Path(args.out) if args.out else src.with_suffix(".pgm")
    export_pgm(read_terrain(src), dst)
    print(dst)
    return 0


def cmd_inspect(args) -> int:
    manifest = DatasetManifest.read(args.manifest)
    if args.csv:
        write_scatter_csv(manifest, args.csv)
    _print(stats(manifest))
    return 0


def cmd_validate(args) -> int:
    path = Path(args.manifest)
    if path.is_dir():
        path = path / MANIFEST_NAME
    problems = validate(path)
    for p in problems:
        print(p)
    print("ok" if not problems else f"{len(problems)} problem(s)")
    return 0 if not problems else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="terrainflow", description="Flow-based sampler for terrain control points.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, seed_default=0):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=seed_default)
        p.set_defaults(fn=fn)
        return p

    p = add("train", cmd_train, "train a sampler (--seed overrides the config's seed)", seed_default=None)
    p.add_argument("--task", choices=("hard", "medium"), required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)

    p = add("sample", cmd_sample, "write a dataset from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)

    p = add("score", cmd_score, "score a TRB1 terrain")
    p.add_argument("terrain")
    p.add_argument("--config")

    p = add("baseline", cmd_baseline, "scores of uniformly random trajectories")
    p.add_argument("--length", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--task", choices=("hard", "medium"), default="hard")
    p.add_argument("--config")

    p = add("export-pgm", cmd_export_pgm, "convert a TRB1 terrain to 16-bit PGM")
    p.add_argument("terrain")
    p.add_argument("--out")

    p = add("inspect", cmd_inspect, "summary statistics of a dataset manifest")
    p.add_argument("manifest")
    p.add_argument("--csv", help="also write (length, beta) pairs here")

    p = add("validate", cmd_validate, "rescore every terrain of a dataset")
    p.add_argument("manifest")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
