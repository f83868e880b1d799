"""Task vectors: extraction, scaling, and routed application.

A task vector is the elementwise difference between a fine-tuned
checkpoint and its base. Applying one back onto a base supports routing
rules so that whole modules (a frozen vision tower, a projector) can be
transplanted verbatim from a donor instead of merged arithmetically.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ._util import parallel_map
from .errors import FingerprintMismatch, MergeError, ShapeMismatch, ValidationError
from .tensor_store import Checkpoint, Tensor

log = logging.getLogger(__name__)

MERGE = "merge"
KEEP_BASE = "keep_base"
COPY_FROM = "copy_from"
_ACTIONS = (MERGE, KEEP_BASE, COPY_FROM)


def manifest_fingerprint(ckpt: Checkpoint) -> str:
    """Digest of the (name, shape, dtype) manifest, ignoring tensor values.

    Checkpoints that share an architecture fingerprint can exchange task
    vectors even when their bytes differ. The in-memory dtype is always
    F32, so storage precision does not split fingerprints.
    """
    digest = hashlib.sha256()
    for name, tensor in ckpt.items():
        shape = ",".join(str(d) for d in tensor.shape)
        digest.update(f"{name}\x00{shape}\x00F32\x1e".encode("utf-8"))
    return digest.hexdigest()


@dataclass
class TaskVector:
    """Per-tensor deltas keyed by name, tied to a base manifest fingerprint."""

    base_fingerprint: str
    deltas: dict[str, np.ndarray] = field(default_factory=dict)
    skipped: tuple[str, ...] = ()

    def names(self) -> tuple[str, ...]:
        return tuple(sorted(self.deltas))

    def __contains__(self, name: str) -> bool:
        return name in self.deltas

    def __getitem__(self, name: str) -> np.ndarray:
        return self.deltas[name]

    def scaled(self, factor: float) -> "TaskVector":
        lam = np.float32(factor)
        return TaskVector(
            self.base_fingerprint,
            {k: v * lam for k, v in self.deltas.items()},
            self.skipped,
        )

    def restricted(self, names: Sequence[str]) -> "TaskVector":
        keep = set(names)
        return TaskVector(
            self.base_fingerprint,
            {k: v for k, v in self.deltas.items() if k in keep},
            self.skipped,
        )

    def nonzero_fraction(self) -> float:
        total = sum(int(v.size) for v in self.deltas.values())
        if total == 0:
            return 0.0
        nonzero = sum(int(np.count_nonzero(v)) for v in self.deltas.values())
        return nonzero / total

    def to_checkpoint(self) -> Checkpoint:
        meta = {
            "kind": "task_vector",
            "base_fingerprint": self.base_fingerprint,
            "skipped_keys": json.dumps(sorted(self.skipped)),
        }
        return Checkpoint(
            [Tensor(name, values) for name, values in sorted(self.deltas.items())],
            metadata=meta,
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "TaskVector":
        fingerprint = ckpt.metadata.get("base_fingerprint")
        if fingerprint is None:
            raise ValidationError("not a task-vector file: missing base_fingerprint metadata")
        skipped = tuple(json.loads(ckpt.metadata.get("skipped_keys", "[]")))
        return cls(fingerprint, {name: t.data for name, t in ckpt.items()}, skipped)


def compute_delta(tuned: Checkpoint, base: Checkpoint) -> TaskVector:
    """tuned - base over the shared keys.

    Keys present only in ``tuned`` (donor-only modules such as a vision
    tower) are excluded from the delta and reported via ``skipped``; they
    are handled by copy_from routing, never by merging.
    """
    shared = sorted(set(tuned.names()) & set(base.names()))
    if not shared:
        raise ValidationError("no shared keys between tuned and base checkpoints")
    deltas: dict[str, np.ndarray] = {}
    for name in shared:
        a, b = tuned[name], base[name]
        if a.shape != b.shape:
            raise ShapeMismatch(
                f"shape mismatch for key '{name}': {a.shape} vs {b.shape}"
            )
        deltas[name] = a.data - b.data
    skipped = tuple(sorted(set(tuned.names()) - set(base.names())))
    if skipped:
        log.info("compute_delta: %d tuned-only keys excluded: %s", len(skipped), skipped)
    return TaskVector(manifest_fingerprint(base), deltas, skipped)


@dataclass(frozen=True)
class RoutingRule:
    """First-match-wins dispatch of tensor names to a merge action.

    ``pattern`` is an anchored regular expression over tensor names.
    ``donor`` is required for copy_from and meaningless otherwise.
    """

    pattern: str
    action: str
    donor: str | None = None

    def __post_init__(self) -> None:
        if self.action not in _ACTIONS:
            raise ValidationError(f"unknown routing action '{self.action}'")
        if self.action == COPY_FROM and not self.donor:
            raise ValidationError(f"copy_from rule '{self.pattern}' needs a donor id")


class _CompiledRouting:
    def __init__(self, rules: Sequence[RoutingRule]):
        self.rules = list(rules) + [RoutingRule(".*", MERGE)]
        try:
            self.compiled = [re.compile(rule.pattern) for rule in self.rules]
        except re.error as exc:
            raise ValidationError(f"invalid routing pattern: {exc}") from exc

    def decide(self, name: str) -> RoutingRule:
        for rule, rx in zip(self.rules, self.compiled):
            if rx.fullmatch(name):
                return rule
        raise AssertionError("default rule always matches")


def routing_actions(
    rules: Sequence[RoutingRule] | None,
    base: Checkpoint,
    donors: Mapping[str, Checkpoint] | None = None,
) -> dict[str, RoutingRule]:
    """Resolve the action for every output key.

    The output key set is the union of base keys and donor keys captured
    by a copy_from rule naming that donor. A trailing default merge rule
    is always in effect.
    """
    routing = _CompiledRouting(rules or [])
    donors = donors or {}
    decisions = {name: routing.decide(name) for name in base.names()}
    for donor_id in sorted(donors):
        for name in donors[donor_id].names():
            if name in decisions:
                continue
            rule = routing.decide(name)
            if rule.action == COPY_FROM and rule.donor == donor_id:
                decisions[name] = rule
    return decisions


def apply(
    base: Checkpoint,
    combined: TaskVector | None = None,
    routing: Sequence[RoutingRule] | None = None,
    donors: Mapping[str, Checkpoint] | None = None,
    threads: int = 1,
) -> Checkpoint:
    """Assemble the merged checkpoint.

    Per output key: copy_from takes the donor tensor verbatim, merge adds
    the combined delta onto the base, keep_base passes the base through.
    Base keys without a delta under a merge rule are kept as-is and
    logged. Deterministic regardless of donor map order or thread count.
    """
    donors = donors or {}
    if combined is not None and combined.base_fingerprint != manifest_fingerprint(base):
        raise FingerprintMismatch(
            "task vector fingerprint does not match the base checkpoint manifest"
        )
    decisions = routing_actions(routing, base, donors)

    def build(name: str) -> Tensor:
        rule = decisions[name]
        if rule.action == COPY_FROM:
            donor_id = rule.donor or ""
            if donor_id not in donors:
                raise MergeError(f"routing rule '{rule.pattern}' references unknown donor '{donor_id}'")
            donor = donors[donor_id]
            if name not in donor:
                raise MergeError(f"copy_from key '{name}' absent in donor '{donor_id}'")
            return Tensor(name, donor[name].data)
        if rule.action == KEEP_BASE:
            return Tensor(name, base[name].data)
        base_tensor = base[name]
        if combined is None or name not in combined:
            return Tensor(name, base_tensor.data)
        delta = combined[name]
        if tuple(delta.shape) != base_tensor.shape:
            raise ShapeMismatch(
                f"shape mismatch for key '{name}': {base_tensor.shape} vs {tuple(delta.shape)}"
            )
        return Tensor(name, base_tensor.data + delta)

    names = sorted(decisions)
    tensors = parallel_map(build, names, threads)
    if combined is not None:
        unmatched = [
            n for n in names if decisions[n].action == MERGE and n not in combined and n in base
        ]
        if unmatched:
            log.info("apply: %d merge-routed keys had no delta and kept base values", len(unmatched))
    return Checkpoint(tensors, metadata=dict(base.metadata))
