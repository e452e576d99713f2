"""Parallel-tempered MCMC over independent stacks of temperature ladders.

Each stack holds T chains at inverse temperatures 1 = beta_0 > ... > beta_M.
Chains of one stack advance together as a batch; stacks are independent and
may run in separate worker processes. Every chain draws its randomness from
its own stream, keyed by (stack, temperature), so the output does not depend
on how many workers are used.
"""
from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
import multiprocessing as mp

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import CheckpointError, ConfigError, InvalidInputError
from . import _kernels as K
from .proposals import KINDS, PCN_ETA_MIN, TARGET_ACCEPT, ProposalState

TARGET_SWAP = 0.24
MAX_LOG_SPACING = float(np.log(1e4))
BUFFER_BLOCK = 256
CHECKPOINT_MAGIC = b"PTGEOCKP"
FORMAT_VERSION = 1


# -- ladder ---------------------------------------------------------------

@dataclass
class Ladder:
    betas: np.ndarray
    attempts: np.ndarray = None
    accepts: np.ndarray = None
    rounds: int = 0

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=float)
        check_betas(self.betas)
        m = len(self.betas) - 1
        if self.attempts is None:
            self.attempts = np.zeros(m, dtype=np.int64)
        if self.accepts is None:
            self.accepts = np.zeros(m, dtype=np.int64)

    @property
    def swap_rates(self):
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.attempts > 0, self.accepts / np.maximum(self.attempts, 1), np.nan)


def check_betas(betas):
    betas = np.asarray(betas, dtype=float)
    if betas.ndim != 1 or betas.size < 1:
        raise ConfigError("ladder needs at least one inverse temperature")
    if betas[0] != 1.0:
        raise ConfigError("the first inverse temperature must be 1")
    if np.any(betas <= 0) or np.any(np.diff(betas) >= 0):
        raise ConfigError("inverse temperatures must be positive and strictly decreasing")


def init_ladder(n_temps, beta_min) -> Ladder:
    """Geometric ladder beta_k = beta_min**(k/M), k = 0..M."""
    if int(n_temps) != n_temps or n_temps < 2:
        raise ConfigError("n_temps must be an integer >= 2")
    if not 0.0 < beta_min < 1.0:
        raise ConfigError("beta_min must lie in (0, 1)")
    m = int(n_temps) - 1
    return Ladder(betas=beta_min ** (np.arange(m + 1) / m))


def swap_log_ratio(beta, beta_hot, ll, ll_hot):
    """Log acceptance ratio for exchanging states between two temperatures.

    The colder chain (``beta``) holds log-likelihood ``ll``; priors cancel in
    an exchange.
    """
    if beta == beta_hot:
        return 0.0
    return (beta - beta_hot) * (ll_hot - ll)


def swap_step(ladder: Ladder, chains: dict, log_u, parity):
    """One round of adjacent swaps on pairs (k, k+1) with k % 2 == parity.

    ``chains`` maps names to arrays with a leading temperature axis and must
    include ``"ll"``; rows of every array are exchanged on acceptance.
    ``log_u`` holds one log-uniform per pair. Returns the accepted pair mask.
    """
    betas = ladder.betas
    ll = chains["ll"]
    accepted = np.zeros(len(betas) - 1, dtype=bool)
    for k in range(parity, len(betas) - 1, 2):
        ladder.attempts[k] += 1
        r = swap_log_ratio(betas[k], betas[k + 1], ll[k], ll[k + 1])
        if not np.isnan(r) and log_u[k] < r:
            accepted[k] = True
            ladder.accepts[k] += 1
            for arr in chains.values():
                arr[[k, k + 1]] = arr[[k + 1, k]]
    ladder.rounds += 1
    return accepted


def adapt_ladder(ladder: Ladder, attempted, accepted, n, gain=1.0):
    """Move log-spacings of attempted pairs by (gain/n)(accepted - 0.24).

    beta_0 stays at 1 and the ladder stays strictly decreasing.
    """
    if len(ladder.betas) < 2 or gain == 0.0:
        return ladder
    spacing = -np.diff(np.log(ladder.betas))
    step = (gain / n) * (accepted.astype(float) - TARGET_SWAP)
    spacing = np.where(attempted, spacing * np.exp(step), spacing)
    spacing = np.minimum(spacing, MAX_LOG_SPACING)
    ladder.betas = np.exp(-np.concatenate([[0.0], np.cumsum(spacing)]))
    ladder.betas[0] = 1.0
    return ladder


# -- settings and targets -------------------------------------------------

@dataclass
class SamplerSettings:
    iterations: int = 10_000
    n_stacks: int = 4
    n_temps: int = 8
    beta_min: float = 0.01
    betas: tuple | None = None
    swap_interval: int = 10
    thinning: int = 10
    seed: int = 0
    proposal: str = "pcn"
    eta0: float = 0.1
    a: float = 10.0
    gain: float = 1.0
    ladder_gain: float = 1.0
    adapt_ladder: bool = True
    adapt_until: int | None = None
    checkpoint_interval: int = 0

    def __post_init__(self):
        errs = []
        if self.iterations < 0:
            errs.append("iterations must be >= 0")
        if self.n_stacks < 1:
            errs.append("n_stacks must be >= 1")
        if self.proposal not in KINDS:
            errs.append(f"proposal must be one of {KINDS}")
        if self.eta0 <= 0:
            errs.append("eta0 must be > 0")
        if self.proposal == "pcn" and self.eta0 > 1:
            errs.append("eta0 must be <= 1 for pCN")
        if self.swap_interval < 0 or self.thinning < 1 or self.checkpoint_interval < 0:
            errs.append("swap_interval and checkpoint_interval must be >= 0, thinning >= 1")
        if self.a <= 0:
            errs.append("a must be > 0")
        if errs:
            raise ConfigError("; ".join(errs), errors=errs)
        if self.betas is not None:
            self.betas = tuple(float(b) for b in self.betas)
            check_betas(self.betas)
            self.n_temps = len(self.betas)
        else:
            init_ladder(self.n_temps, self.beta_min)

    def ladder(self) -> Ladder:
        if self.betas is not None:
            return Ladder(betas=np.array(self.betas))
        return init_ladder(self.n_temps, self.beta_min)

    def initial_eta(self, betas):
        """Per-temperature starting step sizes eta0 * beta**-0.5, capped at 1."""
        return np.minimum(self.eta0 * np.asarray(betas) ** -0.5, max(1.0, self.eta0))

    def hash(self, extra=""):
        """Digest of everything that shapes the sample stream except run length."""
        d = asdict(self)
        d.pop("iterations")
        d.pop("checkpoint_interval")
        blob = json.dumps(d, sort_keys=True, default=str) + "|" + str(extra)
        return hashlib.sha256(blob.encode()).hexdigest()


class CallableTarget:
    """Target from a prior and a batched log-likelihood function."""

    def __init__(self, prior, loglike, names=None, units=None):
        self.prior = prior
        self._loglike = loglike
        self.dim = prior.dim
        self.param_names = list(names) if names else [f"theta[{i}]" for i in range(self.dim)]
        self.param_units = list(units) if units else [""] * self.dim

    def log_likelihood(self, thetas):
        return np.asarray(self._loglike(np.atleast_2d(thetas)), dtype=float)


# -- stack state ------------------------------------------------------------

@dataclass
class StackState:
    index: int
    ladder: Ladder
    z: np.ndarray
    ll: np.ndarray
    lp: np.ndarray
    prop: ProposalState
    rngs: list
    swap_rng: np.random.Generator
    nbuf: np.ndarray = None
    ubuf: np.ndarray = None
    buf_pos: int = BUFFER_BLOCK
    iteration: int = 0
    nan_count: int = 0

    def refill(self):
        t, d = self.z.shape
        self.nbuf = np.empty((BUFFER_BLOCK, t, d))
        self.ubuf = np.empty((BUFFER_BLOCK, t))  # log-uniforms
        for k, g in enumerate(self.rngs):
            self.nbuf[:, k, :] = g.standard_normal((BUFFER_BLOCK, d))
            self.ubuf[:, k] = np.log(g.random(BUFFER_BLOCK))
        self.buf_pos = 0


def _seed_seq(seed, *key):
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))


def init_stack(target, settings: SamplerSettings, index, initial=None) -> StackState:
    ladder = settings.ladder()
    t, d = len(ladder.betas), target.dim
    prior = target.prior
    wm = prior.whitening
    if initial is None:
        g = np.random.default_rng(_seed_seq(settings.seed, index, 2))
        z = g.standard_normal((t, d)) @ prior.whitened_chol.T
    else:
        theta0 = np.broadcast_to(np.asarray(initial, dtype=float), (t, d))
        z = wm.whiten(theta0).copy()
    theta = wm.unwhiten(z)
    ll = target.log_likelihood(theta)
    lp = prior.logpdf(theta)
    prop = ProposalState.create(settings.proposal, settings.initial_eta(ladder.betas), d,
                                a=settings.a, gain=settings.gain)
    rngs = [np.random.default_rng(_seed_seq(settings.seed, index, 0, k)) for k in range(t)]
    swap_rng = np.random.default_rng(_seed_seq(settings.seed, index, 1))
    return StackState(index=index, ladder=ladder, z=z, ll=np.asarray(ll, float),
                      lp=np.asarray(lp, float), prop=prop, rngs=rngs, swap_rng=swap_rng)


def advance(state: StackState, target, settings: SamplerSettings, stop):
    """Run one stack from ``state.iteration`` to ``stop``.

    Returns the recorded beta_0 parameters, beta_0 log-likelihoods and the
    per-record step sizes and inverse temperatures.
    """
    prior = target.prior
    wm = prior.whitening
    lw = np.ascontiguousarray(prior.whitened_chol)
    offset, scale = wm.offset, wm.scale
    kind = settings.proposal
    code = K.KIND_CODES[kind]
    use_prior = kind != "pcn"
    adapt_until = np.inf if settings.adapt_until is None else settings.adapt_until
    thin, swap_every = settings.thinning, settings.swap_interval
    t, d = state.z.shape
    zp = np.empty((t, d))
    theta_p = np.empty((t, d))
    chol = np.zeros((1, 1, 1))
    lpp = np.zeros(t)
    accepted = np.zeros(t, dtype=np.bool_)
    swapped = np.zeros(max(t - 1, 1), dtype=np.bool_)
    pairs = np.arange(max(t - 1, 0))
    prop = state.prop
    rec_theta, rec_ll, rec_eta, rec_beta = [], [], [], []
    while state.iteration < stop:
        i = state.iteration
        if state.buf_pos >= BUFFER_BLOCK:
            state.refill()
        xi = state.nbuf[state.buf_pos]
        log_u = state.ubuf[state.buf_pos]
        state.buf_pos += 1
        betas = state.ladder.betas

        if code == K.AGRW:
            chol = np.linalg.cholesky(prop.mixed_cov())
        K.propose_into(code, state.z, prop.eta, xi, lw, chol, offset, scale, zp, theta_p)
        llp = np.asarray(target.log_likelihood(theta_p), dtype=float)
        if use_prior:
            lpp = prior.logpdf(theta_p)
        prop.n += 1
        state.nan_count += K.mh_update(code, state.z, zp, state.ll, llp, state.lp, lpp, betas,
                                       log_u, prop.eta, prop.accept_count, prop.n, prop.gain,
                                       i < adapt_until, TARGET_ACCEPT, PCN_ETA_MIN, accepted)
        prop.record_history(state.z)

        if swap_every and t > 1 and (i + 1) % swap_every == 0:
            log_us = np.log(state.swap_rng.random(t - 1))
            ladder = state.ladder
            parity = ladder.rounds % 2
            K.swap_round(state.z, state.ll, state.lp, betas, log_us, parity,
                         ladder.attempts, ladder.accepts, swapped)
            ladder.rounds += 1
            if settings.adapt_ladder and i < adapt_until:
                adapt_ladder(ladder, pairs % 2 == parity, swapped[:t - 1], ladder.rounds,
                             settings.ladder_gain)

        state.iteration += 1
        if state.iteration % thin == 0:
            rec_theta.append(offset + state.z[0] * scale)
            rec_ll.append(state.ll[0])
            rec_eta.append(prop.eta.copy())
            rec_beta.append(state.ladder.betas.copy())
    d = state.z.shape[1]
    return {
        "samples": np.array(rec_theta).reshape(-1, d),
        "loglike": np.array(rec_ll).reshape(-1, 1),
        "eta": np.array(rec_eta).reshape(-1, t),
        "beta": np.array(rec_beta).reshape(-1, t),
    }


# -- worker plumbing --------------------------------------------------------

_WORKER = {}


def _worker_init(target, settings):
    _WORKER["target"] = target
    _WORKER["settings"] = settings


def _worker_advance(state, stop):
    t0 = time.process_time()
    with threadpool_limits(limits=1):
        recs = advance(state, _WORKER["target"], _WORKER["settings"], stop)
    return state, recs, time.process_time() - t0


def default_workers():
    env = os.environ.get("PTGEO_WORKERS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"PTGEO_WORKERS must be an integer, got {env!r}") from None
        if n < 1:
            raise ConfigError("PTGEO_WORKERS must be >= 1")
        return n
    return os.cpu_count() or 1


# -- stores -------------------------------------------------------------------

STREAMS = ("samples", "loglike", "eta", "beta")


def store_path(out_dir, stream, stack):
    return Path(out_dir) / f"{stream}_stack{stack}.f64"


def write_sidecar(out_dir, target, settings, n_records, config_hash):
    t = settings.n_temps
    meta = {
        "format_version": FORMAT_VERSION,
        "dtype": "<f8",
        "order": "row-major",
        "n_stacks": settings.n_stacks,
        "n_records": [int(n) for n in n_records],
        "thinning": settings.thinning,
        "config_hash": config_hash,
        "streams": {
            "samples": {"columns": list(target.param_names), "units": list(target.param_units)},
            "loglike": {"columns": ["log_likelihood"], "units": [""]},
            "eta": {"columns": [f"eta[{k}]" for k in range(t)], "units": [""] * t},
            "beta": {"columns": [f"beta[{k}]" for k in range(t)], "units": [""] * t},
        },
        "files": {s: [store_path(".", s, k).name for k in range(settings.n_stacks)]
                  for s in STREAMS},
    }
    with open(Path(out_dir) / "samples.json", "w") as fh:
        json.dump(meta, fh, indent=2)


def read_store(out_dir, stream="samples", stack=None):
    """Load a stream as (n_records, n_columns) arrays; one per stack unless ``stack`` given."""
    out_dir = Path(out_dir)
    try:
        meta = json.loads((out_dir / "samples.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"cannot read sample store sidecar in {out_dir}: {exc}") from None
    ncol = len(meta["streams"][stream]["columns"])
    stacks = range(meta["n_stacks"]) if stack is None else [stack]
    arrays = []
    for k in stacks:
        raw = np.fromfile(out_dir / meta["files"][stream][k], dtype="<f8")
        arrays.append(raw.reshape(-1, ncol)[: meta["n_records"][k]])
    return arrays[0] if stack is not None else arrays


# -- checkpoints --------------------------------------------------------------

def _encode(obj, arrays):
    """JSON-able tree with arrays replaced by references into ``arrays``."""
    if isinstance(obj, np.ndarray):
        arrays.append(np.ascontiguousarray(obj))
        return {"__array__": len(arrays) - 1}
    if isinstance(obj, np.random.Generator):
        return {"__rng__": _encode(obj.bit_generator.state, arrays)}
    if isinstance(obj, (Ladder, ProposalState, StackState)):
        fields = {f: _encode(getattr(obj, f), arrays) for f in obj.__dataclass_fields__}
        return {"__type__": type(obj).__name__, "fields": fields}
    if isinstance(obj, dict):
        return {"__dict__": [[k, _encode(v, arrays)] for k, v in obj.items()]}
    if isinstance(obj, (list, tuple)):
        return [_encode(v, arrays) for v in obj]
    if isinstance(obj, (np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


_TYPES = {"Ladder": lambda: Ladder, "ProposalState": lambda: ProposalState,
          "StackState": lambda: StackState}


def _decode(obj, arrays):
    if isinstance(obj, list):
        return [_decode(v, arrays) for v in obj]
    if not isinstance(obj, dict):
        return obj
    if "__array__" in obj:
        return arrays[obj["__array__"]]
    if "__rng__" in obj:
        state = _decode(obj["__rng__"], arrays)
        bg = getattr(np.random, state["bit_generator"])()
        bg.state = state
        return np.random.Generator(bg)
    if "__type__" in obj:
        cls = _TYPES[obj["__type__"]]()
        return cls(**{k: _decode(v, arrays) for k, v in obj["fields"].items()})
    return {k: _decode(v, arrays) for k, v in obj["__dict__"]}


def save_checkpoint(path, payload):
    """Write ``payload`` atomically in a canonical layout.

    The file is the magic bytes, a version, a JSON header and raw little-endian
    array blocks; equal payloads always give equal bytes.
    """
    path = Path(path)
    arrays = []
    tree = _encode(payload, arrays)
    header = {"tree": tree,
              "arrays": [{"dtype": a.dtype.newbyteorder("<").str, "shape": list(a.shape)}
                         for a in arrays]}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(FORMAT_VERSION.to_bytes(4, "little"))
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for a in arrays:
            fh.write(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes())
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
                raise CheckpointError(f"{path} is not a checkpoint file")
            version = int.from_bytes(fh.read(4), "little")
            if version != FORMAT_VERSION:
                raise CheckpointError(f"unsupported checkpoint version {version}")
            n = int.from_bytes(fh.read(8), "little")
            if n > os.fstat(fh.fileno()).st_size:
                raise CheckpointError(f"checkpoint {path} is truncated")
            header = json.loads(fh.read(n))
            arrays = []
            for spec in header["arrays"]:
                dt = np.dtype(spec["dtype"])
                count = int(np.prod(spec["shape"], dtype=np.int64))
                raw = fh.read(count * dt.itemsize)
                if len(raw) != count * dt.itemsize:
                    raise CheckpointError(f"checkpoint {path} is truncated")
                arrays.append(np.frombuffer(raw, dtype=dt).reshape(spec["shape"]).astype(
                    dt.newbyteorder("="), copy=True))
            return _decode(header["tree"], arrays)
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    except (ValueError, KeyError, TypeError, AttributeError, IndexError) as exc:
        raise CheckpointError(f"checkpoint {path} is corrupt: {exc}") from None


TIMING_NAME = "timing.json"


def write_timing(out_dir, timing):
    """Timings live apart from the stores and checkpoint, which must be reproducible."""
    with open(Path(out_dir) / TIMING_NAME, "w") as fh:
        json.dump(timing, fh, indent=2)


def read_timing(out_dir):
    try:
        return json.loads((Path(out_dir) / TIMING_NAME).read_text())
    except (OSError, json.JSONDecodeError):
        return {}


# -- driver -------------------------------------------------------------------

@dataclass
class RunResult:
    samples: list
    loglike: list
    eta: list
    beta: list
    acceptance: np.ndarray
    swap_rates: np.ndarray
    betas: np.ndarray
    final_eta: np.ndarray
    nan_count: np.ndarray
    wall_time: float
    cpu_time: float
    config_hash: str
    out_dir: str | None = None
    metadata: dict = field(default_factory=dict)


class ParallelTempering:
    """Run, checkpoint and resume a multi-stack PTMCMC.

    ``target`` provides ``dim``, ``prior`` (a :class:`~ptgeo.priors.BlockPrior`),
    ``param_names``, ``param_units`` and batched ``log_likelihood``. With an
    ``out_dir`` the beta_0 samples stream to flat binary files and a checkpoint
    is written every ``checkpoint_interval`` iterations and at the end.
    """

    CHECKPOINT_NAME = "checkpoint.bin"

    def __init__(self, target, settings: SamplerSettings, out_dir=None, config_hash=None,
                 workers=None, initial=None):
        self.target = target
        self.settings = settings
        self.out_dir = None if out_dir is None else Path(out_dir)
        self.config_hash = config_hash or settings.hash()
        self.workers = default_workers() if workers is None else int(workers)
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        self.initial = initial
        self.states = None
        self.records = None
        self.cpu_time = 0.0
        self.wall_time = 0.0

    # public API
    def run(self) -> RunResult:
        s = self.settings
        init = self.initial
        if init is not None:
            init = np.asarray(init, dtype=float)
        self.states = []
        for k in range(s.n_stacks):
            ik = init if init is None or init.ndim < 3 else init[k]
            self.states.append(init_stack(self.target, s, k, ik))
        self.records = [{name: [] for name in STREAMS} for _ in range(s.n_stacks)]
        self._written = [0] * s.n_stacks
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            for k in range(s.n_stacks):
                for name in STREAMS:
                    open(store_path(self.out_dir, name, k), "wb").close()
        return self._advance_to(s.iterations)

    @classmethod
    def resume(cls, target, settings, checkpoint, out_dir=None, config_hash=None, workers=None):
        payload = load_checkpoint(checkpoint)
        pt = cls(target, settings, out_dir=out_dir or Path(checkpoint).parent,
                 config_hash=config_hash, workers=workers)
        if payload.get("config_hash") != pt.config_hash:
            raise CheckpointError("checkpoint was written with a different configuration "
                                  f"(hash {payload.get('config_hash')!r} != {pt.config_hash!r})")
        pt.states = payload["states"]
        pt._written = payload["written"]
        timing = read_timing(pt.out_dir)
        pt.cpu_time = timing.get("cpu_time_s", 0.0)
        pt.wall_time = timing.get("wall_time_s", 0.0)
        pt.records = [{name: [] for name in STREAMS} for _ in range(settings.n_stacks)]
        if len(pt.states) != settings.n_stacks:
            raise CheckpointError("checkpoint stack count does not match the configuration")
        pt.out_dir.mkdir(parents=True, exist_ok=True)
        for k, n in enumerate(pt._written):
            for name in STREAMS:
                path = store_path(pt.out_dir, name, k)
                width = pt._width(name)
                size = n * width * 8
                if not path.exists() or path.stat().st_size < size:
                    raise CheckpointError(f"sample store {path} is shorter than the checkpoint")
                with open(path, "r+b") as fh:
                    fh.truncate(size)
        if settings.iterations < pt.states[0].iteration:
            raise CheckpointError("requested iterations are fewer than already completed")
        return pt._advance_to(settings.iterations)

    # internals
    def _width(self, name):
        return {"samples": self.target.dim, "loglike": 1}.get(name, self.settings.n_temps)

    def _segments(self, start, stop):
        step = self.settings.checkpoint_interval if self.out_dir is not None else 0
        bounds = []
        cur = start
        while cur < stop:
            nxt = stop if step <= 0 else min(stop, (cur // step + 1) * step)
            bounds.append(nxt)
            cur = nxt
        return bounds

    def _advance_to(self, stop):
        t_wall = time.perf_counter()
        start = self.states[0].iteration
        pool = None
        nproc = min(self.workers, len(self.states))
        try:
            if nproc > 1 and stop > start:
                pool = ProcessPoolExecutor(max_workers=nproc, mp_context=mp.get_context("fork"),
                                           initializer=_worker_init,
                                           initargs=(self.target, self.settings))
            for seg_stop in self._segments(start, stop):
                if pool is None:
                    _worker_init(self.target, self.settings)
                    results = [_worker_advance(st, seg_stop) for st in self.states]
                else:
                    futs = [pool.submit(_worker_advance, st, seg_stop) for st in self.states]
                    results = [f.result() for f in futs]
                self.states = [r[0] for r in results]
                self.cpu_time += sum(r[2] for r in results)
                for k, (_, recs, _) in enumerate(results):
                    self._store(k, recs)
                if self.out_dir is not None:
                    self._checkpoint(t_wall)
        finally:
            if pool is not None:
                pool.shutdown()
            _WORKER.clear()
        self.wall_time += time.perf_counter() - t_wall
        if self.out_dir is not None:
            self._checkpoint(None)
        return self._result()

    def _store(self, k, recs):
        for name in STREAMS:
            self.records[k][name].append(recs[name])
            if self.out_dir is not None:
                with open(store_path(self.out_dir, name, k), "ab") as fh:
                    fh.write(np.ascontiguousarray(recs[name], dtype="<f8").tobytes())
        self._written[k] += len(recs["samples"])

    def _checkpoint(self, t_wall):
        wall = self.wall_time + (0.0 if t_wall is None else time.perf_counter() - t_wall)
        write_sidecar(self.out_dir, self.target, self.settings, self._written, self.config_hash)
        save_checkpoint(self.out_dir / self.CHECKPOINT_NAME, {
            "config_hash": self.config_hash,
            "states": self.states,
            "written": list(self._written),
        })
        write_timing(self.out_dir, {"cpu_time_s": self.cpu_time, "wall_time_s": wall,
                                    "workers": self.workers})

    def _result(self) -> RunResult:
        def collect(name):
            if self.out_dir is not None:
                return [read_store(self.out_dir, name, k) for k in range(len(self.states))]
            w = self._width(name)
            return [np.concatenate(r[name]) if r[name] else np.zeros((0, w)) for r in self.records]

        n = np.array([max(st.prop.n, 1) for st in self.states])
        acc = np.array([st.prop.accept_count for st in self.states]) / n[:, None]
        res = RunResult(
            samples=collect("samples"), loglike=collect("loglike"),
            eta=collect("eta"), beta=collect("beta"),
            acceptance=acc,
            swap_rates=np.array([st.ladder.swap_rates for st in self.states]),
            betas=np.array([st.ladder.betas for st in self.states]),
            final_eta=np.array([st.prop.eta for st in self.states]),
            nan_count=np.array([st.nan_count for st in self.states]),
            wall_time=self.wall_time, cpu_time=self.cpu_time,
            config_hash=self.config_hash,
            out_dir=None if self.out_dir is None else str(self.out_dir))
        res.metadata = {
            "format_version": FORMAT_VERSION,
            "seed": self.settings.seed,
            "config_hash": self.config_hash,
            "iterations": int(self.states[0].iteration),
            "initial_eta_schedule": "eta0 * beta**-0.5, capped at max(1, eta0)",
            "initial_eta": self.settings.initial_eta(self.settings.ladder().betas).tolist(),
            "final_eta": res.final_eta.tolist(),
            "final_betas": res.betas.tolist(),
            "acceptance": res.acceptance.tolist(),
            "swap_rates": np.nan_to_num(res.swap_rates, nan=-1.0).tolist(),
            "nan_proposals": res.nan_count.tolist(),
            "history_files": {"eta": "eta_stack{k}.f64", "beta": "beta_stack{k}.f64"},
            "timings_file": TIMING_NAME,
        }
        if self.out_dir is not None:
            with open(self.out_dir / "run_metadata.json", "w") as fh:
                json.dump(res.metadata, fh, indent=2)
        return res
