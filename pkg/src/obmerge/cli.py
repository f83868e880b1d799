"""Command-line surface: diff, calibrate, merge, inspect, validate.

Merges are driven by a JSON recipe with a declared schema version.
Unknown fields are rejected rather than ignored; silent misconfiguration
is the main field-failure mode of merge tooling. Every command is a thin
shell over the library; recipe runs are reproducible byte-for-byte apart
from wall-clock figures in the report.

Exit codes: 0 success, 1 runtime error, 2 validation error.
"""

from __future__ import annotations

import argparse
import json
import math
import re
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, kernels, toynet
from ._util import sha256_hex
from .errors import ObmergeError, RecipeError, ValidationError
from .mergers import AGGREGATIONS, DEFAULT_DENSITY, METHODS, SCOPES, TA_PAIR_LAMBDAS, combine
from .saliency import ActivationStats, default_layer_map, score
from .task_vectors import (
    MERGE,
    RoutingRule,
    TaskVector,
    apply,
    compute_delta,
    routing_actions,
)
from .tensor_store import checkpoint_bytes, read_checkpoint, write_checkpoint

RECIPE_VERSION = 1

_TOP_FIELDS = {
    "version", "method", "base", "donors", "scope", "aggregation",
    "seed", "routing", "output", "report",
}
_DONOR_FIELDS = {"id", "path", "lambda", "density", "stats_path"}
_ROUTING_FIELDS = {"pattern", "action", "donor"}


@dataclass(frozen=True)
class DonorSpec:
    id: str
    path: Path
    lam: float
    density: float
    stats_path: Path | None


@dataclass(frozen=True)
class Recipe:
    method: str
    base: Path
    donors: tuple[DonorSpec, ...]
    scope: str
    aggregation: str
    seed: int
    routing: tuple[RoutingRule, ...]
    output: Path
    report: Path | None
    sha256: str


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def parse_recipe(path: str | Path, check_files: bool = True) -> Recipe:
    """Load and validate a recipe; raises RecipeError listing every issue."""
    path = Path(path)
    raw = path.read_bytes()
    try:
        data = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise RecipeError([f"recipe: not valid JSON: {exc}"]) from exc
    if not isinstance(data, dict):
        raise RecipeError(["recipe: top level must be a JSON object"])

    issues: list[str] = []
    base_dir = path.parent

    for field in sorted(set(data) - _TOP_FIELDS):
        issues.append(f"{field}: unknown field")
    if data.get("version") != RECIPE_VERSION:
        issues.append(f"version: must be {RECIPE_VERSION}")

    method = data.get("method")
    if method not in METHODS:
        issues.append(f"method: must be one of {', '.join(METHODS)}")
        method = None

    base_ref = data.get("base")
    if not isinstance(base_ref, str):
        issues.append("base: required string path")
        base_ref = ""

    scope = data.get("scope", "per_tensor")
    if scope not in SCOPES:
        issues.append(f"scope: must be one of {', '.join(SCOPES)}")
    aggregation = data.get("aggregation", "disjoint_mean")
    if aggregation not in AGGREGATIONS:
        issues.append(f"aggregation: must be one of {', '.join(AGGREGATIONS)}")
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or not (0 <= seed < 2**64):
        issues.append("seed: must be an integer in [0, 2^64)")
        seed = 0

    output_ref = data.get("output")
    if not isinstance(output_ref, str):
        issues.append("output: required string path")
        output_ref = ""
    report_ref = data.get("report")
    if report_ref is not None and not isinstance(report_ref, str):
        issues.append("report: must be a string path")
        report_ref = None

    raw_donors = data.get("donors")
    donors: list[DonorSpec] = []
    donor_ids: list[str] = []
    if not isinstance(raw_donors, list) or not raw_donors:
        issues.append("donors: required non-empty list")
        raw_donors = []
    missing_lambda: list[int] = []
    for index, entry in enumerate(raw_donors):
        where = f"donors[{index}]"
        if not isinstance(entry, dict):
            issues.append(f"{where}: must be an object")
            continue
        for field in sorted(set(entry) - _DONOR_FIELDS):
            issues.append(f"{where}.{field}: unknown field")
        donor_id = entry.get("id")
        if not isinstance(donor_id, str) or not donor_id:
            issues.append(f"{where}.id: required string")
            donor_id = f"donor{index}"
        elif donor_id in donor_ids:
            issues.append(f"{where}.id: duplicate donor id '{donor_id}'")
        donor_ids.append(donor_id)
        donor_path = entry.get("path")
        if not isinstance(donor_path, str):
            issues.append(f"{where}.path: required string path")
            donor_path = ""

        lam = entry.get("lambda")
        if lam is not None and not _is_number(lam):
            issues.append(f"{where}.lambda: must be a number")
            lam = None
        if method == "ta" and lam is None:
            missing_lambda.append(index)

        density = entry.get("density")
        if density is not None:
            if method == "ta":
                issues.append(f"{where}.density: not applicable to method 'ta'")
                density = None
            elif not _is_number(density) or not (0.0 < density <= 1.0):
                issues.append(f"{where}.density: must be a number in (0, 1]")
                density = None

        stats_ref = entry.get("stats_path")
        if method == "obm":
            if not isinstance(stats_ref, str):
                issues.append(f"{where}.stats_path: required for method 'obm'")
                stats_ref = None
        elif stats_ref is not None:
            issues.append(f"{where}.stats_path: only applicable to method 'obm'")
            stats_ref = None

        donors.append(
            DonorSpec(
                id=donor_id,
                path=base_dir / donor_path,
                lam=float(lam) if lam is not None else 1.0,
                density=float(density) if density is not None else DEFAULT_DENSITY.get(method or "", 1.0),
                stats_path=base_dir / stats_ref if stats_ref else None,
            )
        )

    if method == "ta" and missing_lambda:
        if len(raw_donors) == 2 and len(missing_lambda) == 2:
            donors = [
                DonorSpec(d.id, d.path, TA_PAIR_LAMBDAS[i], d.density, d.stats_path)
                for i, d in enumerate(donors)
            ]
        else:
            for index in missing_lambda:
                issues.append(f"donors[{index}].lambda: required for method 'ta'")

    routing: list[RoutingRule] = []
    raw_routing = data.get("routing", [])
    if not isinstance(raw_routing, list):
        issues.append("routing: must be a list")
        raw_routing = []
    for index, entry in enumerate(raw_routing):
        where = f"routing[{index}]"
        if not isinstance(entry, dict):
            issues.append(f"{where}: must be an object")
            continue
        for field in sorted(set(entry) - _ROUTING_FIELDS):
            issues.append(f"{where}.{field}: unknown field")
        pattern = entry.get("pattern")
        action = entry.get("action")
        donor = entry.get("donor")
        if not isinstance(pattern, str):
            issues.append(f"{where}.pattern: required string")
            continue
        if action not in ("merge", "keep_base", "copy_from"):
            issues.append(f"{where}.action: must be merge, keep_base or copy_from")
            continue
        if action == "copy_from":
            if not isinstance(donor, str):
                issues.append(f"{where}.donor: required for copy_from")
                continue
            if donor not in donor_ids:
                issues.append(f"{where}.donor: unknown donor id '{donor}'")
                continue
        elif donor is not None:
            issues.append(f"{where}.donor: only applicable to copy_from")
        try:
            re.compile(pattern)
        except re.error as exc:
            issues.append(f"{where}.pattern: invalid regular expression: {exc}")
            continue
        routing.append(RoutingRule(pattern, action, donor if action == "copy_from" else None))

    if check_files and not issues:
        if not (base_dir / base_ref).is_file():
            issues.append(f"base: file not found: {base_ref}")
        for index, donor in enumerate(donors):
            if not donor.path.is_file():
                issues.append(f"donors[{index}].path: file not found: {donor.path.name}")
            if donor.stats_path is not None and not donor.stats_path.is_file():
                issues.append(
                    f"donors[{index}].stats_path: stats missing: {donor.stats_path.name}"
                )

    if issues:
        raise RecipeError(issues)
    return Recipe(
        method=method or "ta",
        base=base_dir / base_ref,
        donors=tuple(donors),
        scope=scope,
        aggregation=aggregation,
        seed=seed,
        routing=tuple(routing),
        output=base_dir / output_ref,
        report=base_dir / report_ref if report_ref else None,
        sha256=sha256_hex(raw),
    )


class PhaseTimer:
    """Collects (phase, wall seconds) pairs in execution order."""

    def __init__(self) -> None:
        self.entries: list[dict] = []

    @contextmanager
    def __call__(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.entries.append(
                {"name": name, "seconds": round(time.perf_counter() - start, 6)}
            )


def _saliency_digest(sal_map) -> str:
    import hashlib

    digest = hashlib.sha256()
    for name in sal_map.names():
        digest.update(name.encode("utf-8") + b"\x00")
        digest.update(sal_map[name].tobytes())
    return digest.hexdigest()


def run_merge(recipe: Recipe, threads: int = 1, seed_override: int | None = None) -> dict:
    """Execute a recipe end to end; returns the run report."""
    timer = PhaseTimer()
    seed = recipe.seed if seed_override is None else seed_override
    forwards_before = toynet.FORWARD_PASSES

    with timer("load_inputs"):
        base = read_checkpoint(recipe.base)
        donor_ckpts = {d.id: read_checkpoint(d.path) for d in recipe.donors}

    decisions = routing_actions(recipe.routing, base, donor_ckpts)
    merge_keys = sorted(k for k, rule in decisions.items() if rule.action == MERGE)

    with timer("deltas"):
        deltas = {
            d.id: compute_delta(donor_ckpts[d.id], base).restricted(merge_keys)
            for d in recipe.donors
        }

    stats: dict[str, ActivationStats] | None = None
    if recipe.method == "obm":
        with timer("stats_load"):
            stats = {
                d.id: ActivationStats.load(d.stats_path)
                for d in recipe.donors
                if d.stats_path is not None
            }

    combined, saliencies, sparsified = combine(
        recipe.method,
        deltas,
        lambdas={d.id: d.lam for d in recipe.donors},
        densities={d.id: d.density for d in recipe.donors},
        stats=stats,
        scope=recipe.scope,
        seed=seed,
        aggregation=recipe.aggregation,
        threads=threads,
        timer=timer,
    )

    with timer("apply"):
        merged = apply(base, combined, recipe.routing, donor_ckpts, threads)
        merged.metadata["merge_method"] = recipe.method
        merged.metadata["recipe_sha256"] = recipe.sha256

    with timer("write"):
        blob = checkpoint_bytes(merged)
        recipe.output.write_bytes(blob)

    action_counts: dict[str, int] = {}
    for rule in decisions.values():
        action_counts[rule.action] = action_counts.get(rule.action, 0) + 1

    report: dict = {
        "schema": 1,
        "method": recipe.method,
        "recipe_sha256": recipe.sha256,
        "seed": seed,
        "threads": threads,
        "tensors": len(merged),
        "parameters": int(sum(t.size for _, t in merged.items())),
        "merge_keys": len(merge_keys),
        "routing_counts": dict(sorted(action_counts.items())),
        "excluded_donor_keys": {d.id: sorted(deltas[d.id].skipped) for d in recipe.donors},
        "post_trim_density": {
            d.id: round(sparsified[d.id].nonzero_fraction(), 9) for d in recipe.donors
        },
        "forward_passes": toynet.FORWARD_PASSES - forwards_before,
        "output_sha256": sha256_hex(blob),
        "kernel_backend": kernels.BACKEND,
        "phases": timer.entries,
    }
    if saliencies is not None:
        report["saliency_sha256"] = {
            donor_id: _saliency_digest(sal) for donor_id, sal in sorted(saliencies.items())
        }
    if recipe.report is not None:
        recipe.report.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", "utf-8")
    return report


# -- subcommands -------------------------------------------------------------


def _cmd_diff(args) -> int:
    tuned = read_checkpoint(args.tuned)
    base = read_checkpoint(args.base)
    delta = compute_delta(tuned, base)
    write_checkpoint(delta.to_checkpoint(), args.out)
    if args.json:
        print(
            json.dumps(
                {
                    "keys": len(delta.names()),
                    "skipped": sorted(delta.skipped),
                    "base_fingerprint": delta.base_fingerprint,
                    "out": args.out,
                }
            )
        )
    else:
        print(f"wrote {len(delta.names())} deltas to {args.out}")
        if delta.skipped:
            print(f"excluded {len(delta.skipped)} tuned-only keys: {', '.join(delta.skipped)}")
    return 0


def _cmd_calibrate(args) -> int:
    model = toynet.load_model(args.model)
    data = toynet.load_calibration(args.data)
    if data.count == 0:
        raise ValidationError(f"no calibration coverage: '{args.data}' is empty")
    stats = ActivationStats()
    model.forward(data, collect=stats)
    stats.save(args.out, extra_metadata={"calibration_records": str(data.count)})
    if args.json:
        print(
            json.dumps(
                {
                    "records": data.count,
                    "layers": list(stats.layers()),
                    "tokens": {layer: stats.token_count(layer) for layer in stats.layers()},
                    "out": args.out,
                }
            )
        )
    else:
        print(f"calibrated {len(stats.layers())} layers from {data.count} records -> {args.out}")
    return 0


def _cmd_merge(args) -> int:
    recipe = parse_recipe(args.recipe)
    report = run_merge(recipe, threads=max(1, args.threads), seed_override=args.seed)
    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True))
    else:
        print(
            f"merged {report['tensors']} tensors ({report['parameters']} parameters) "
            f"via {report['method']} -> {recipe.output}"
        )
        for phase in report["phases"]:
            print(f"  {phase['name']:<12} {phase['seconds']:.6f}s")
    return 0


def _density_of(values: np.ndarray) -> float:
    if values.size == 0:
        return 0.0
    return float(np.count_nonzero(values)) / float(values.size)


def _cmd_inspect(args) -> int:
    ckpt = read_checkpoint(args.path)
    tensors: dict[str, dict] = {name: {"density": _density_of(t.data)} for name, t in ckpt.items()}
    total = sum(t.size for _, t in ckpt.items())
    nonzero = sum(int(np.count_nonzero(t.data)) for _, t in ckpt.items())
    overall: dict = {"density": (nonzero / total) if total else 0.0}

    if args.against:
        other = read_checkpoint(args.against)
        conflict_total = 0
        common_size = 0
        for name in sorted(set(ckpt.names()) & set(other.names())):
            a, b = ckpt[name].data, other[name].data
            if a.shape != b.shape:
                continue
            conflicts = int(np.count_nonzero(np.sign(a) * np.sign(b) < 0))
            tensors[name]["conflict_rate"] = conflicts / a.size if a.size else 0.0
            conflict_total += conflicts
            common_size += a.size
        overall["conflict_rate"] = (conflict_total / common_size) if common_size else 0.0

    if args.stats:
        stats = ActivationStats.load(args.stats)
        delta = TaskVector("", {name: t.data for name, t in ckpt.items()})
        sal = score(delta, stats, default_layer_map(delta.names(), stats))
        overlaps = []
        for name in delta.names():
            flat = delta[name].ravel()
            if flat.size == 0:
                continue
            k = min(flat.size, int(math.ceil(args.density * flat.size)))
            by_sal = kernels.rank_topk_mask(sal[name].ravel(), np.abs(flat), k)
            by_mag = kernels.rank_topk_mask(np.abs(flat), None, k)
            overlap = float(np.count_nonzero(by_sal & by_mag)) / k
            tensors[name]["rank_overlap"] = overlap
            overlaps.append((overlap, flat.size))
        if overlaps:
            weight = sum(size for _, size in overlaps)
            overall["rank_overlap"] = sum(o * size for o, size in overlaps) / weight

    if args.json:
        print(json.dumps({"tensors": tensors, "overall": overall}, indent=2, sort_keys=True))
        return 0
    columns = ["density"] + [c for c in ("conflict_rate", "rank_overlap") if c in overall]
    header = f"{'tensor':<32}" + "".join(f"{c:>16}" for c in columns)
    print(header)
    for name in sorted(tensors):
        row = f"{name:<32}"
        for column in columns:
            value = tensors[name].get(column)
            row += f"{value:>16.6f}" if value is not None else f"{'-':>16}"
        print(row)
    row = f"{'(overall)':<32}"
    for column in columns:
        row += f"{overall[column]:>16.6f}"
    print(row)
    return 0


def _cmd_validate(args) -> int:
    parse_recipe(args.recipe)
    print("recipe ok")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="obmerge",
        description="Compose task-specialized checkpoints at the parameter level.",
    )
    parser.add_argument("--version", action="version", version=f"obmerge {__version__}")
    parser.add_argument("--seed", type=int, default=None, help="override the recipe seed")
    parser.add_argument("--threads", type=int, default=1, help="per-tensor worker threads")
    parser.add_argument("--json", action="store_true", help="machine-readable output")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("diff", help="compute a task vector (tuned minus base)")
    p.add_argument("tuned")
    p.add_argument("base")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_diff)

    p = sub.add_parser("calibrate", help="collect activation stats from a forward pass")
    p.add_argument("model", help="architecture JSON (optionally referencing params)")
    p.add_argument("data", help="JSONL calibration set")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_calibrate)

    p = sub.add_parser("merge", help="execute a merge recipe")
    p.add_argument("recipe")
    p.set_defaults(handler=_cmd_merge)

    p = sub.add_parser("inspect", help="report density, conflicts and rank overlap")
    p.add_argument("path")
    p.add_argument("--against", help="second delta for sign-conflict rates")
    p.add_argument("--stats", help="activation stats for saliency-vs-magnitude overlap")
    p.add_argument("--density", type=float, default=0.7, help="top fraction for rank overlap")
    p.set_defaults(handler=_cmd_inspect)

    p = sub.add_parser("validate", help="lint a merge recipe")
    p.add_argument("recipe")
    p.set_defaults(handler=_cmd_validate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except RecipeError as exc:
        for issue in exc.issues:
            print(f"recipe error: {issue}", file=sys.stderr)
        return exc.exit_code
    except ObmergeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
