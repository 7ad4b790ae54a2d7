"""Error-correction labels, prompt instances and the on-disk corpus format.

Labels are indexed by the source coarse node: ``errors[j]`` corrects the
transition ``j -> j+1``, so a coarse trajectory with ``n + 1`` nodes carries
``n`` label vectors.
"""

from __future__ import annotations

import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .integrators import Grid, IntegrationConfig, StepScheme, Trajectory, increment, node_times, simulate_batch
from .systems import ParamRangeSet, SystemId, get_system, regime_params, sample_initial_condition, sample_params

log = logging.getLogger(__name__)

MAGIC = b"FMNT"
FORMAT_VERSION = 1
SYSTEM_CODES = {s.value: i for i, s in enumerate(SystemId)}
SYSTEM_NAMES = {i: s for s, i in SYSTEM_CODES.items()}


class ProvenanceError(ValueError):
    pass


class CorpusFormatError(ValueError):
    pass


def _same_params(a, b) -> bool:
    return set(a) == set(b) and all(float(a[k]) == float(b[k]) for k in a)


def make_error_labels(fine: Trajectory, coarse: Trajectory, scheme=None) -> np.ndarray:
    """``err_j = u[k(j+1)] - û[j] - S(f, û[j], kΔt)`` for every coarse transition."""
    if fine.system != coarse.system or not _same_params(fine.params, coarse.params):
        raise ProvenanceError("fine and coarse trajectories come from different systems/params")
    if not np.array_equal(fine.ic, coarse.ic):
        raise ProvenanceError("fine and coarse trajectories have different initial conditions")
    if fine.stride != 1 or fine.dt != coarse.dt:
        raise ProvenanceError("fine grid must use the base step of the coarse grid")
    k = coarse.stride
    n = coarse.n_steps
    if fine.n_steps != k * n:
        raise ProvenanceError(f"grid misalignment: fine has {fine.n_steps} steps, coarse covers {k * n}")
    scheme = coarse.scheme if scheme is None else StepScheme(scheme)
    src = coarse.states[:-1]
    t = node_times(n, k, coarse.dt)
    return fine.states[k::k] - src - increment(scheme, coarse.system, coarse.params, src, t, k * coarse.dt)


@dataclass(eq=False)
class DemoPair:
    coarse: Trajectory
    errors: np.ndarray

    def __post_init__(self):
        if self.coarse.grid is not Grid.COARSE:
            raise ValueError("demo pairs hold coarse trajectories")
        if self.errors.shape != (self.coarse.n_steps, self.coarse.states.shape[1]):
            raise ValueError(f"errors shape {self.errors.shape} does not match coarse trajectory")


@dataclass(eq=False)
class PromptInstance:
    demos: list[DemoPair]
    query_coarse: Trajectory
    query_errors: np.ndarray | None = None

    @property
    def d(self) -> int:
        return len(self.demos)


def check_provenance(trajectories: Iterable[Trajectory]) -> None:
    trajectories = list(trajectories)
    ref = trajectories[0]
    for tr in trajectories[1:]:
        if tr.system != ref.system or not _same_params(tr.params, ref.params):
            raise ProvenanceError(f"prompt mixes {ref.system}{dict(ref.params)} with {tr.system}{dict(tr.params)}")
        if tr.dt != ref.dt or tr.stride != ref.stride:
            raise ProvenanceError("prompt mixes different step sizes or strides")


def build_prompt(pairs: Sequence[DemoPair], query: DemoPair | Trajectory, d: int | None = None) -> PromptInstance:
    pairs = list(pairs)
    if d is not None and len(pairs) != d:
        raise ValueError(f"expected {d} demos, got {len(pairs)}")
    if isinstance(query, DemoPair):
        q_coarse, q_err = query.coarse, query.errors
    else:
        q_coarse, q_err = query, None
    check_provenance([p.coarse for p in pairs] + [q_coarse])
    return PromptInstance(pairs, q_coarse, q_err)


@dataclass(eq=False)
class CorpusRecord:
    system: str
    variation: int
    index: int
    params: dict
    ic: np.ndarray
    dt: float
    stride: int
    coarse: np.ndarray
    errors: np.ndarray
    scheme: StepScheme = StepScheme.RK4
    seed: list | None = None
    split: str = "train"

    @property
    def n_coarse(self) -> int:
        return len(self.errors)

    def trajectory(self) -> Trajectory:
        return Trajectory(self.system, dict(self.params), self.ic, self.dt, self.stride, self.coarse,
                          self.scheme, Grid.COARSE)

    def demo(self) -> DemoPair:
        return DemoPair(self.trajectory(), self.errors)

    def fine_at_nodes(self) -> np.ndarray:
        """Fine states at coarse nodes 1..n, recovered as ``û[j] + S + err[j]``."""
        src = self.coarse[:-1]
        t = node_times(len(src), self.stride, self.dt)
        return src + increment(self.scheme, self.system, self.params, src, t, self.stride * self.dt) + self.errors

    def equals(self, other: "CorpusRecord") -> bool:
        return (self.system == other.system and self.variation == other.variation and self.index == other.index
                and self.params == other.params and self.dt == other.dt and self.stride == other.stride
                and np.array_equal(self.ic, other.ic) and np.array_equal(self.coarse, other.coarse)
                and np.array_equal(self.errors, other.errors) and self.split == other.split
                and StepScheme(self.scheme) is StepScheme(other.scheme))


@dataclass(eq=False)
class Corpus:
    system: str
    config: IntegrationConfig | None
    records: list[CorpusRecord] = field(default_factory=list)
    seed: int | None = None
    source: str = "test"
    excluded: list[dict] = field(default_factory=list)

    def variations(self) -> dict[int, list[CorpusRecord]]:
        out: dict[int, list[CorpusRecord]] = {}
        for r in self.records:
            out.setdefault(r.variation, []).append(r)
        return out

    def subset(self, variations: Iterable[int], split: str | None = None) -> "Corpus":
        keep = set(variations)
        recs = []
        for r in self.records:
            if r.variation in keep:
                if split is not None:
                    r = CorpusRecord(**{**r.__dict__, "split": split})
                recs.append(r)
        return Corpus(self.system, self.config, recs, self.seed, self.source,
                      [e for e in self.excluded if e["variation"] in keep])

    def manifest(self, offsets: Sequence[tuple[int, int]] | None = None) -> dict:
        cfg = None
        if self.config is not None:
            cfg = {"dt": self.config.dt, "n_fine_steps": self.config.n_fine_steps,
                   "stride": self.config.stride, "scheme": StepScheme(self.config.scheme).value}
        recs = []
        for i, r in enumerate(self.records):
            entry = {"variation": r.variation, "index": r.index, "seed": r.seed, "split": r.split,
                     "scheme": StepScheme(r.scheme).value}
            if offsets is not None:
                entry["offset"], entry["nbytes"] = offsets[i]
            recs.append(entry)
        splits: dict[str, int] = {}
        for r in self.records:
            splits[r.split] = splits.get(r.split, 0) + 1
        return {
            "format": MAGIC.decode(), "version": FORMAT_VERSION, "system": self.system,
            "config": cfg, "seed": self.seed, "source": self.source,
            "counts": {"records": len(self.records), "variations": len(self.variations()),
                       "excluded": len(self.excluded), "splits": splits},
            "excluded": self.excluded, "records": recs,
        }


def variation_records(sys_, v, params, n_traj, config, seed):
    seeds = [[seed, v, i] for i in range(n_traj)]
    ics = np.stack([sample_initial_condition(sys_, s) for s in seeds])
    fine, fine_bad = simulate_batch(sys_, params, ics, config, Grid.FINE)
    coarse, coarse_bad = simulate_batch(sys_, params, ics, config, Grid.COARSE)
    recs, excluded = [], []
    for i in range(n_traj):
        if fine[i] is None or coarse[i] is None:
            excluded.append({"variation": v, "index": i, "seed": seeds[i],
                             "grid": "fine" if fine[i] is None else "coarse"})
            continue
        err = make_error_labels(fine[i], coarse[i])
        recs.append(CorpusRecord(sys_.name, v, i, dict(params), ics[i], config.dt, config.stride,
                                 coarse[i].states, err, config.scheme, seeds[i]))
    return recs, excluded


def generate_corpus(system, ranges: ParamRangeSet | str | None, n_variations: int, n_trajectories: int,
                    config: IntegrationConfig | None = None, seed: int = 0, *, regime: str | None = None,
                    threads: int = 1, n_coarse: int = 100) -> Corpus:
    """Simulate ``n_variations`` parameter draws × ``n_trajectories`` ICs.

    Parameters of variation ``v`` come from seed ``[seed, v]``; the IC of
    trajectory ``i`` from ``[seed, v, i]``.  Trajectories that blow up are
    excluded and listed in ``Corpus.excluded``.
    """
    sys_ = get_system(system)
    if config is None:
        config = IntegrationConfig.for_system(sys_, n_coarse=n_coarse)
    if regime is not None:
        draws = [regime_params(sys_, regime, [seed, v]) for v in range(n_variations)]
        source = f"regime:{regime}"
    else:
        ranges = "test" if ranges is None else ranges
        draws = [sample_params(sys_, ranges, [seed, v]) for v in range(n_variations)]
        source = ranges if isinstance(ranges, str) else ranges.tag

    def work(v):
        return variation_records(sys_, v, draws[v], n_trajectories, config, seed)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(work, range(n_variations)))
    else:
        results = [work(v) for v in range(n_variations)]
    corpus = Corpus(sys_.name, config, seed=seed, source=source)
    for recs, excl in results:
        corpus.records.extend(recs)
        corpus.excluded.extend(excl)
    if corpus.excluded:
        log.warning("%s: excluded %d diverging trajectories", sys_.name, len(corpus.excluded))
    return corpus


def split_corpus(corpus: Corpus, test_fraction: float, seed: int = 0) -> tuple[Corpus, Corpus]:
    """Split whole variations so test parameters are never seen in training."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    ids = sorted(corpus.variations())
    n_test = int(round(test_fraction * len(ids)))
    if n_test < 1 or n_test >= len(ids):
        raise ValueError(f"cannot split {len(ids)} variations with test_fraction={test_fraction}")
    perm = np.random.default_rng(seed).permutation(len(ids))
    test_ids = {ids[i] for i in perm[:n_test]}
    train_ids = set(ids) - test_ids
    return corpus.subset(train_ids, "train"), corpus.subset(test_ids, "test")


def prompt_groups(records: Sequence, d: int, rng: np.random.Generator) -> list[list]:
    """Partition one variation's trajectories into groups of ``d + 1`` without replacement."""
    perm = rng.permutation(len(records))
    size = d + 1
    return [[records[i] for i in perm[g:g + size]] for g in range(0, len(perm) - size + 1, size)]


# --- binary format -------------------------------------------------------

_HEADER = struct.Struct("<4sI")
_RECORD_HEAD = struct.Struct("<BBIdI")


def _encode_record(r: CorpusRecord) -> bytes:
    dim = r.coarse.shape[1]
    names = sorted(r.params)
    parts = [
        _RECORD_HEAD.pack(SYSTEM_CODES[r.system], dim, r.stride, r.dt, r.n_coarse),
        np.asarray([r.params[k] for k in names], dtype="<f8").tobytes(),
        np.asarray(r.ic, dtype="<f8").tobytes(),
        np.ascontiguousarray(r.coarse, dtype="<f8").tobytes(),
        np.ascontiguousarray(r.errors, dtype="<f8").tobytes(),
    ]
    return b"".join(parts)


def _decode_record(buf: bytes) -> CorpusRecord:
    try:
        code, dim, k, dt, n = _RECORD_HEAD.unpack_from(buf, 0)
        name = SYSTEM_NAMES[code]
    except (struct.error, KeyError) as exc:
        raise CorpusFormatError(f"bad record header: {exc}") from None
    names = sorted(get_system(name).param_names)
    off = _RECORD_HEAD.size
    sizes = [len(names), dim, (n + 1) * dim, n * dim]
    if len(buf) != off + 8 * sum(sizes):
        raise CorpusFormatError("record length does not match its header")
    arrays = []
    for s in sizes:
        arrays.append(np.frombuffer(buf, dtype="<f8", count=s, offset=off).astype(np.float64))
        off += 8 * s
    pvals, ic, coarse, err = arrays
    params = dict(zip(names, map(float, pvals)))
    params = {p: params[p] for p in get_system(name).param_names}
    return CorpusRecord(name, -1, -1, params, ic, dt, k, coarse.reshape(n + 1, dim), err.reshape(n, dim))


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def write_corpus(corpus: Corpus, path) -> Path:
    """Write the binary corpus plus its JSON manifest sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    offsets = []
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION))
        for r in corpus.records:
            blob = _encode_record(r)
            fh.write(struct.pack("<I", len(blob)))
            offsets.append((fh.tell(), len(blob)))
            fh.write(blob)
    with open(manifest_path(path), "w") as fh:
        json.dump(corpus.manifest(offsets), fh, indent=1)
    return path


def read_records(path) -> list[CorpusRecord]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CorpusFormatError("file too short for header")
    magic, version = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CorpusFormatError(f"bad magic {magic!r}; not a corpus file")
    if version != FORMAT_VERSION:
        raise CorpusFormatError(f"unsupported corpus version {version}")
    pos = _HEADER.size
    out = []
    while pos < len(data):
        if pos + 4 > len(data):
            raise CorpusFormatError("truncated record length")
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + n > len(data):
            raise CorpusFormatError("truncated record")
        out.append(_decode_record(data[pos:pos + n]))
        pos += n
    return out


def read_corpus(path) -> Corpus:
    path = Path(path)
    records = read_records(path)
    mpath = manifest_path(path)
    if not mpath.exists():
        system = records[0].system if records else ""
        return Corpus(system, None, records, source="unknown")
    man = json.loads(mpath.read_text())
    if man.get("version") != FORMAT_VERSION:
        raise CorpusFormatError(f"unsupported manifest version {man.get('version')}")
    if len(man["records"]) != len(records):
        raise CorpusFormatError("manifest and corpus disagree on record count")
    for r, m in zip(records, man["records"]):
        r.variation, r.index, r.split = m["variation"], m["index"], m["split"]
        r.seed = m["seed"]
        r.scheme = StepScheme(m["scheme"])
    cfg = man["config"]
    config = IntegrationConfig(cfg["dt"], cfg["n_fine_steps"], cfg["stride"], cfg["scheme"]) if cfg else None
    return Corpus(man["system"], config, records, man["seed"], man["source"], man["excluded"])
