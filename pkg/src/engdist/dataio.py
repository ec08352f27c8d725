"""File formats and data assembly.

Transition logs are JSON Lines (one transition per line, successor keys
omitted on terminal steps).  MDP specs and value tables are single JSON
documents.  Model files are a one-line JSON manifest followed by raw
little-endian float32 tensors in manifest order.  Floats in JSON use
Python's shortest round-trip representation.  Parsing is fail-fast: a
malformed line aborts with its line number rather than being dropped.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .distdp import ValueTable
from .errors import DataFormatError, ValidationError
from .simenv import State, StateFeaturizer, SyntheticMDP, Transition

MODEL_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# session records and transition assembly


@dataclass(frozen=True, slots=True)
class SessionRecord:
    """Raw per-decision log row, before transition pairing."""

    session_id: int
    step: int
    state: State
    action: int
    reward: int


def build_transitions(records: Sequence[SessionRecord]) -> list[Transition]:
    """Pair consecutive rows of each session into transitions.

    The last row of a session becomes a terminal transition; every other row
    carries the successor's state and action.  Output is ordered by
    (session_id, step) regardless of input interleaving.
    """
    sessions: dict = {}
    for rec in records:
        rows = sessions.setdefault(rec.session_id, {})
        if rec.step in rows:
            raise DataFormatError(
                f"session {rec.session_id}: duplicate step {rec.step}")
        rows[rec.step] = rec
    out: list[Transition] = []
    for sid in sorted(sessions):
        rows = sessions[sid]
        for want in range(len(rows)):
            if want not in rows:
                raise DataFormatError(
                    f"session {sid}: missing step {want} "
                    f"(steps must be contiguous from 0)")
        ordered = [rows[i] for i in range(len(rows))]
        for i, rec in enumerate(ordered):
            if i + 1 < len(ordered):
                nxt = ordered[i + 1]
                out.append(Transition(sid, rec.step, rec.state, rec.action,
                                      rec.reward, 0, nxt.state, nxt.action))
            else:
                out.append(Transition(sid, rec.step, rec.state, rec.action,
                                      rec.reward, 1))
    return out


# ---------------------------------------------------------------------------
# batching


def batch_indices(n: int, batch_size: int, seed: int,
                  epochs: int) -> Iterator[np.ndarray]:
    """Seeded minibatch index stream: one fresh permutation per epoch, final
    short batch kept."""
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    if n < 1:
        raise ValidationError(f"dataset is empty")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    for _ in range(epochs):
        perm = rng.permutation(n)
        for lo in range(0, n, batch_size):
            yield perm[lo:lo + batch_size]


def batch_iterator(transitions: Sequence[Transition], batch_size: int,
                   seed: int, epochs: int) -> Iterator[list[Transition]]:
    """``batch_indices`` applied to a transition list."""
    for idx in batch_indices(len(transitions), batch_size, seed, epochs):
        yield [transitions[i] for i in idx]


# ---------------------------------------------------------------------------
# transition logs (JSON Lines)


def _encode_state(state: State):
    return list(state) if isinstance(state, tuple) else state


def _decode_state(raw) -> State:
    if isinstance(raw, list):
        return tuple(int(v) for v in raw)
    return int(raw)


def transition_to_json(t: Transition) -> str:
    doc = {"session_id": t.session_id, "step": t.step,
           "state": _encode_state(t.state), "action": t.action,
           "reward": t.reward, "terminal": t.terminal}
    if not t.terminal:
        doc["next_state"] = _encode_state(t.next_state)
        doc["next_action"] = t.next_action
    return json.dumps(doc, separators=(",", ":"))


def write_logs(path, transitions: Sequence[Transition]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in transitions:
            fh.write(transition_to_json(t))
            fh.write("\n")


def _parse_transition(doc: dict, where: str) -> Transition:
    try:
        terminal = int(doc["terminal"])
        if terminal not in (0, 1):
            raise DataFormatError(f"{where}: terminal must be 0 or 1")
        reward = int(doc["reward"])
        if reward not in (0, 1):
            raise DataFormatError(f"{where}: reward must be 0 or 1")
        if terminal:
            if "next_state" in doc or "next_action" in doc:
                raise DataFormatError(
                    f"{where}: terminal transition carries a successor")
            nxt_s, nxt_a = None, None
        else:
            nxt_s = _decode_state(doc["next_state"])
            nxt_a = int(doc["next_action"])
        return Transition(int(doc["session_id"]), int(doc["step"]),
                          _decode_state(doc["state"]), int(doc["action"]),
                          reward, terminal, nxt_s, nxt_a)
    except KeyError as exc:
        raise DataFormatError(f"{where}: missing key {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise DataFormatError(f"{where}: {exc}") from exc


def read_logs(path) -> list[Transition]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"line {lineno}: bad JSON: {exc}") from exc
            out.append(_parse_transition(doc, f"line {lineno}"))
    return out


# ---------------------------------------------------------------------------
# MDP specs


def mdp_to_dict(mdp: SyntheticMDP) -> dict:
    return {"n_states": mdp.n_states, "n_actions": mdp.n_actions,
            "transition": mdp.transition.tolist(),
            "click_prob": mdp.click_prob.tolist(),
            "term_prob": mdp.term_prob.tolist(),
            "behavior_policy": mdp.behavior_policy.tolist(),
            "initial_state_dist": mdp.initial_state_dist.tolist()}


def write_mdp_spec(path, mdp: SyntheticMDP) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(mdp_to_dict(mdp), fh, indent=2)
        fh.write("\n")


def read_mdp_spec(path) -> SyntheticMDP:
    """Parse and validate an MDP spec; raises ValidationError naming the
    offending row on bad probability tables."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}: bad JSON: {exc}") from exc
    try:
        mdp = SyntheticMDP(
            int(doc["n_states"]), int(doc["n_actions"]),
            np.asarray(doc["transition"], dtype=np.float64),
            np.asarray(doc["click_prob"], dtype=np.float64),
            np.asarray(doc["term_prob"], dtype=np.float64),
            np.asarray(doc["behavior_policy"], dtype=np.float64),
            np.asarray(doc["initial_state_dist"], dtype=np.float64))
    except KeyError as exc:
        raise DataFormatError(f"{path}: missing key {exc}") from exc
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    mdp.validate()
    return mdp


# ---------------------------------------------------------------------------
# value tables


def write_value_table(path, table: ValueTable,
                      provenance: dict | None = None) -> None:
    doc = {"M": table.n_quantiles, "states": table.n_states,
           "actions": table.n_actions, "atoms": table.atoms.tolist()}
    if provenance is not None:
        doc["provenance"] = provenance
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def read_value_table(path) -> ValueTable:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}: bad JSON: {exc}") from exc
    try:
        atoms = np.asarray(doc["atoms"], dtype=np.float64)
        want = (int(doc["states"]), int(doc["actions"]), int(doc["M"]))
    except KeyError as exc:
        raise DataFormatError(f"{path}: missing key {exc}") from exc
    if atoms.shape != want:
        raise DataFormatError(
            f"{path}: atoms shape {atoms.shape} does not match header {want}")
    return ValueTable(atoms)


# ---------------------------------------------------------------------------
# model container: one-line JSON manifest + little-endian float32 tensors


def save_model(path, model, *, objective: str = "quantile",
               training_config: dict | None = None,
               provenance: dict | None = None) -> None:
    """Serialize an EngagementModel.  Tensors are stored as float32, so
    parameters round to float32 precision on a save/load cycle; a loaded
    model re-saves byte-identically."""
    names = model.tensor_names()
    manifest = {
        "format_version": MODEL_FORMAT_VERSION,
        "kind": "engagement-model",
        "n_quantiles": model.n_quantiles,
        "objective": objective,
        "model_config": {
            "state_vocab_sizes": list(model.config.state_vocab_sizes),
            "n_actions": model.config.n_actions,
            "embedding_dim": model.config.embedding_dim,
            "hidden_sizes": list(model.config.hidden_sizes),
            "term_head": model.config.term_head,
        },
        "feature_map": (model.feature_map.to_manifest()
                        if model.feature_map is not None else None),
        "tensors": [{"name": n, "shape": list(model.params[n].shape)}
                    for n in names],
        "training_config": training_config,
        "provenance": provenance,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(
                model.params[n], dtype="<f4").tobytes())


def load_model(path):
    """Read a model container; returns (EngagementModel, manifest dict)."""
    from .qrlearn import EngagementModel, ModelConfig  # deferred: avoids cycle

    with open(path, "rb") as fh:
        header = fh.readline()
        try:
            manifest = json.loads(header.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataFormatError(f"{path}: bad manifest line: {exc}") from exc
        if manifest.get("kind") != "engagement-model":
            raise DataFormatError(f"{path}: not a model container")
        if manifest.get("format_version") != MODEL_FORMAT_VERSION:
            raise DataFormatError(
                f"{path}: unsupported format version "
                f"{manifest.get('format_version')!r}")
        mc = manifest["model_config"]
        config = ModelConfig(
            tuple(int(v) for v in mc["state_vocab_sizes"]),
            int(mc["n_actions"]), int(mc["embedding_dim"]),
            tuple(int(v) for v in mc["hidden_sizes"]), bool(mc["term_head"]))
        params = {}
        for spec in manifest["tensors"]:
            shape = tuple(int(v) for v in spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(4 * count)
            if len(raw) != 4 * count:
                raise DataFormatError(
                    f"{path}: truncated tensor {spec['name']!r}")
            params[spec["name"]] = np.frombuffer(
                raw, dtype="<f4").astype(np.float64).reshape(shape)
        if fh.read(1):
            raise DataFormatError(f"{path}: trailing bytes after tensors")
    fmap = manifest.get("feature_map")
    feature_map = StateFeaturizer.from_manifest(fmap) if fmap else None
    return EngagementModel(config, int(manifest["n_quantiles"]), params,
                           feature_map), manifest


# ---------------------------------------------------------------------------
# training trace


def write_trace_csv(path, trace: Sequence[tuple[int, float, float, float]]
                    ) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,quantile_loss,bce_loss,total\n")
        for step, value_loss, bce, total in trace:
            fh.write(f"{step},{value_loss!r},{bce!r},{total!r}\n")
