"""Binary snapshots of the engine state after a completed round.

Layout (little-endian)::

    b"PGNS"  u32 version
    u32 len, UTF-8 JSON header (config, round, scan counter, reports, schedules, meta)
    u32 n_replicas, u32 dimension
    per replica: u32 index, u32 chain, u8 flag, u64 restarts, u64 round_trips,
                 u64 rng seed, u64 rng gamma, f64 * dimension state
    u64 adapt seed, u64 adapt gamma
    u32 n, f64 * n schedule
    u32 n, u32 * n  replica index at each chain

Worker ranks are not stored, so a run may resume on a different number of workers.
"""

import json
import os
import struct

MAGIC = b"PGNS"
VERSION = 1
CHECKPOINT_NAME = "checkpoint.pgns"

_REPLICA = struct.Struct("<IIBQQQQ")


class CheckpointError(RuntimeError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    def __init__(self, found, supported=VERSION):
        super().__init__(f"checkpoint format version {found} is not supported (this build reads version {supported})")
        self.found = found
        self.supported = supported


def encode(state):
    from roost.engine import RunConfig  # noqa: F401  (import cycle guard)

    header = {
        "config": state.config.to_json(),
        "round": state.round,
        "scan_counter": state.scan_counter,
        "reports": [r.to_json() for r in state.reports],
        "schedules": [list(s) for s in state.schedules],
        "meta": state.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    dim = len(state.replicas[0].state)
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(blob)), blob,
           struct.pack("<II", len(state.replicas), dim)]
    for r in state.replicas:
        out.append(_REPLICA.pack(r.index, r.chain, r.flag, r.restarts, r.round_trips, *r.rng))
        out.append(struct.pack(f"<{dim}d", *r.state))
    out.append(struct.pack("<QQ", *state.adapt_rng))
    out.append(struct.pack(f"<I{len(state.schedule)}d", len(state.schedule), *state.schedule))
    directory = state.directory()
    out.append(struct.pack(f"<I{len(directory)}I", len(directory), *directory))
    return b"".join(out)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, fmt):
        s = struct.Struct(fmt)
        if self.pos + s.size > len(self.data):
            raise CheckpointFormatError("truncated checkpoint")
        vals = s.unpack_from(self.data, self.pos)
        self.pos += s.size
        return vals

    def raw(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointFormatError("truncated checkpoint")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b


def decode(data):
    from roost.engine import EngineState, ReplicaSnapshot, RoundReport, RunConfig

    if data[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic bytes {bytes(data[:4])!r}, expected {MAGIC!r}")
    rd = _Reader(data)
    rd.raw(4)
    (version,) = rd.take("<I")
    if version != VERSION:
        raise CheckpointVersionError(version)
    (n,) = rd.take("<I")
    try:
        header = json.loads(rd.raw(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"corrupt checkpoint header: {e}") from e
    n_rep, dim = rd.take("<II")
    replicas = []
    for _ in range(n_rep):
        index, chain, flag, restarts, trips, seed, gamma = rd.take(_REPLICA.format)
        state = rd.take(f"<{dim}d")
        replicas.append(ReplicaSnapshot(index, chain, tuple(state), (seed, gamma), flag, restarts, trips))
    adapt = rd.take("<QQ")
    (ns,) = rd.take("<I")
    schedule = rd.take(f"<{ns}d")
    (nd,) = rd.take("<I")
    directory = rd.take(f"<{nd}I")
    st = EngineState(
        config=RunConfig.from_json(header["config"]),
        round=header["round"],
        scan_counter=header["scan_counter"],
        schedule=tuple(schedule),
        replicas=replicas,
        adapt_rng=tuple(adapt),
        reports=[RoundReport.from_json(r) for r in header["reports"]],
        schedules=[tuple(s) for s in header["schedules"]],
        meta=header.get("meta", {}),
    )
    if list(directory) != st.directory():
        raise CheckpointFormatError("directory does not match replica chains")
    return st


def round_dir(run_dir, rnd):
    return os.path.join(run_dir, f"round_{rnd}")


def save(state, run_dir):
    """Write the snapshot for ``state.round``; returns the file path."""
    d = round_dir(run_dir, state.round)
    os.makedirs(d, exist_ok=True)
    path = os.path.join(d, CHECKPOINT_NAME)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(encode(state))
    os.replace(tmp, path)
    return path


def load(path):
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror}") from e
    return decode(data)


def write_latest(output_dir, run_dir):
    results = os.path.join(output_dir, "results")
    os.makedirs(results, exist_ok=True)
    tmp = os.path.join(results, "latest.tmp")
    with open(tmp, "w") as f:
        f.write(os.path.abspath(run_dir) + "\n")
    os.replace(tmp, os.path.join(results, "latest"))


def latest_round(run_dir):
    rounds = []
    for name in os.listdir(run_dir):
        if name.startswith("round_") and os.path.exists(os.path.join(run_dir, name, CHECKPOINT_NAME)):
            try:
                rounds.append(int(name[len("round_"):]))
            except ValueError:
                pass
    if not rounds:
        raise CheckpointError(f"no checkpoints under {run_dir}")
    return max(rounds)


def locate(path):
    """Resolve a checkpoint file, round directory, run directory or ``latest``
    pointer to ``(checkpoint_file, run_dir)``."""
    if os.path.isfile(path) and not path.endswith(CHECKPOINT_NAME):
        with open(path, "rb") as f:
            head = f.read(4)
        if head != MAGIC:
            with open(path) as f:
                target = f.read().strip()
            return locate(target)
    if os.path.isfile(path):
        rd = os.path.dirname(os.path.abspath(path))
        return path, os.path.dirname(rd)
    if os.path.isdir(path):
        if os.path.exists(os.path.join(path, CHECKPOINT_NAME)):
            return os.path.join(path, CHECKPOINT_NAME), os.path.dirname(os.path.abspath(path))
        latest = os.path.join(path, "results", "latest")
        if os.path.isfile(latest):
            return locate(latest)
        r = latest_round(path)
        return os.path.join(round_dir(path, r), CHECKPOINT_NAME), os.path.abspath(path)
    raise CheckpointError(f"no checkpoint at {path}")
