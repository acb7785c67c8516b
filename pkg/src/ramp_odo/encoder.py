"""Recurrent, asynchronous, pixel-parallel encoder.

Data flow for one sample of sensor ``k``::

    f^s = conv_k^s(x)                       s = 0, 1, 2 (kernel 1/3/5, stride 2^s)
    h^s, c^s = LSTM_k^s(f^s, h^s, c^s)      independently at every pixel
    Sigma^s = tanh(W_k^s [h^s || Sigma^s])  per-pixel channel mixing
    m, c = MSF_m(Sigma), MSF_c(Sigma)       1/4 resolution heads

The two pixel-wise stages run over a fixed tiling of the pixel grid, so the
result is identical for any number of workers.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .events import N_BINS
from .weights import KERNELS, EncoderConfig, check_weights, init_weights

SENSOR_TAGS = {"events": "ev", "image": "im", "ev": "ev", "im": "im"}


class OrderingError(ValueError):
    pass


@dataclass(frozen=True)
class SensorSample:
    timestamp: float
    kind: str       # "image" or "events"
    payload: np.ndarray
    source_index: int = -1   # input frame number for images, else -1

    @property
    def sensor(self):
        return SENSOR_TAGS[self.kind]

    @property
    def is_frame(self):
        return self.kind == "image"


@dataclass(frozen=True)
class FeatureMaps:
    matching: np.ndarray | None
    context: np.ndarray | None
    timestamp: float


@dataclass
class FusionState:
    h: dict = field(default_factory=dict)       # (sensor, s) -> C_s x H_s x W_s
    c: dict = field(default_factory=dict)
    sigma: list = field(default_factory=list)   # per scale
    last_timestamp: float = -math.inf

    @classmethod
    def zeros(cls, height, width, cfg: EncoderConfig = EncoderConfig()):
        h, c, sigma = {}, {}, []
        for s, C in enumerate(cfg.scale_channels):
            shape = (C, -(-height // 2**s), -(-width // 2**s))
            for k in ("ev", "im"):
                h[(k, s)] = np.zeros(shape, np.float32)
                c[(k, s)] = np.zeros(shape, np.float32)
            sigma.append(np.zeros(shape, np.float32))
        return cls(h, c, sigma)

    def copy(self):
        return FusionState(dict(self.h), dict(self.c), list(self.sigma), self.last_timestamp)


def conv2d(x, w, b=None, stride=1):
    """Zero-padded 2D convolution, output size ``ceil(H / stride)``."""
    cin, H, W = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ValueError(f"input has {cin} channels, kernel expects {wcin}")
    ph, pw = kh // 2, kw // 2
    Ho, Wo = -(-H // stride), -(-W // stride)
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    out = np.zeros((cout, Ho * Wo), np.float32)
    # one GEMM per kernel row, K = kw * cin; contiguous operands stay on BLAS
    wt = np.ascontiguousarray(np.transpose(w, (2, 0, 3, 1)).reshape(kh, cout, kw * cin))
    cols = np.empty((kw, cin, Ho, Wo), np.float32)
    for dy in range(kh):
        rows = xp[:, dy:dy + stride * (Ho - 1) + 1:stride]
        for dx in range(kw):
            cols[dx] = rows[:, :, dx:dx + stride * (Wo - 1) + 1:stride]
        out += wt[dy] @ cols.reshape(kw * cin, -1)
    if b is not None:
        out += b[:, None]
    return out.reshape(cout, Ho, Wo)


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def _relu(x):
    return np.maximum(x, 0.0)


def _instance_norm(x, eps=1e-5):
    mu = x.mean(axis=(1, 2), keepdims=True)
    var = x.var(axis=(1, 2), keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


class _TileRunner:
    """Fan a per-tile function over a fixed tiling of ``n`` pixels."""

    def __init__(self, workers=1, tile=8192):
        if workers < 1:
            raise ValueError("workers must be >= 1")
        self.workers = workers
        self.tile = tile
        self._pool = ThreadPoolExecutor(workers) if workers > 1 else None

    def run(self, fn, n):
        spans = [(a, min(a + self.tile, n)) for a in range(0, n, self.tile)]
        if self._pool is None:
            for a, b in spans:
                fn(a, b)
        else:
            for _ in self._pool.map(lambda ab: fn(*ab), spans):
                pass

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None


def lstm_tile(f, h, c, W, b, h_out, c_out, a, z):
    """Pixel-wise LSTM update on columns ``a:z`` of (C, P) arrays."""
    C = h.shape[0]
    gates = W[:, :C] @ f[:, a:z] + W[:, C:] @ h[:, a:z] + b[:, None]
    i = _sigmoid(gates[:C])
    fg = _sigmoid(gates[C:2 * C])
    o = _sigmoid(gates[2 * C:3 * C])
    g = np.tanh(gates[3 * C:])
    cn = fg * c[:, a:z] + i * g
    c_out[:, a:z] = cn
    h_out[:, a:z] = o * np.tanh(cn)


def fuse_tile(h, sigma, W, b, out, a, z):
    C = h.shape[0]
    out[:, a:z] = np.tanh(W[:, :C] @ h[:, a:z] + W[:, C:] @ sigma[:, a:z] + b[:, None])


class RampEncoder:
    """Encoder bound to one weight set; state is passed in and returned."""

    def __init__(self, height, width, weights=None, cfg: EncoderConfig = EncoderConfig(),
                 workers=1, seed=0, heads=("m", "c")):
        if height % 4 or width % 4:
            raise ValueError(f"input size {height}x{width} must be divisible by 4")
        self.height, self.width = height, width
        self.cfg = cfg
        self.weights = init_weights(cfg, seed) if weights is None else weights
        check_weights(self.weights, cfg)
        self.heads = tuple(heads)
        self.runner = _TileRunner(workers, cfg.tile)
        self.timings = {}

    def close(self):
        self.runner.close()

    def reset(self):
        return FusionState.zeros(self.height, self.width, self.cfg)

    def _tick(self, stage, t0):
        self.timings[stage] = self.timings.get(stage, 0.0) + time.perf_counter() - t0

    # -- stages ---------------------------------------------------------

    def sensor_encode(self, sample: SensorSample):
        x = np.asarray(sample.payload, dtype=np.float32)
        k = sample.sensor
        if x.ndim != 3 or x.shape[1:] != (self.height, self.width):
            raise ValueError(f"payload shape {x.shape} does not match {self.height}x{self.width}")
        feats = []
        for s in range(3):
            name = f"enc.{k}.s{s}.conv.w"
            w = self.weights[name]
            if w.shape[1] != x.shape[0]:
                raise ValueError(f"{name} expects {w.shape[1]} input channels, sample has {x.shape[0]}")
            feats.append(conv2d(x, w, self.weights[f"enc.{k}.s{s}.conv.b"], stride=2**s))
        return feats

    def intra_sensor_fuse(self, state: FusionState, sensor, feats):
        k = SENSOR_TAGS[sensor]
        new_h, new_c = dict(state.h), dict(state.c)
        for s, f in enumerate(feats):
            h, c = state.h[(k, s)], state.c[(k, s)]
            if f.shape != h.shape:
                raise ValueError(f"scale {s} features {f.shape} do not match state {h.shape}")
            C, Hs, Ws = h.shape
            P = Hs * Ws
            f2, h2, c2 = f.reshape(C, P), h.reshape(C, P), c.reshape(C, P)
            ho = np.empty((C, P), np.float32)
            co = np.empty((C, P), np.float32)
            W, b = self.weights[f"lstm.{k}.s{s}.w"], self.weights[f"lstm.{k}.s{s}.b"]
            self.runner.run(lambda a, z: lstm_tile(f2, h2, c2, W, b, ho, co, a, z), P)
            new_h[(k, s)] = ho.reshape(C, Hs, Ws)
            new_c[(k, s)] = co.reshape(C, Hs, Ws)
        return new_h, new_c

    def inter_sensor_fuse(self, state: FusionState, sensor, hs):
        k = SENSOR_TAGS[sensor]
        out = []
        for s, h in enumerate(hs):
            sig = state.sigma[s]
            if h.shape != sig.shape:
                raise ValueError(f"scale {s} hidden map {h.shape} does not match Sigma {sig.shape}")
            C, Hs, Ws = h.shape
            P = Hs * Ws
            h2, s2 = h.reshape(C, P), sig.reshape(C, P)
            o = np.empty((C, P), np.float32)
            W, b = self.weights[f"fuse.{k}.s{s}.w"], self.weights[f"fuse.{k}.s{s}.b"]
            self.runner.run(lambda a, z: fuse_tile(h2, s2, W, b, o, a, z), P)
            out.append(o.reshape(C, Hs, Ws))
        return out

    def multiscale_fuse(self, sigma, head):
        """Hierarchical fusion of the three Sigma scales into one 1/4-res map."""
        s0, s1, s2 = sigma
        C0, H, W = s0.shape
        if H % 4 or W % 4:
            raise ValueError(f"Sigma^0 size {H}x{W} must be divisible by 4")
        if s1.shape[1:] != (H // 2, W // 2) or s2.shape[1:] != (H // 4, W // 4):
            raise ValueError("Sigma scales are inconsistent")
        p = f"msf.{head}"
        wt = self.weights
        norm = _instance_norm if head == "m" else (lambda z: z)

        def res(x, r):
            y = conv2d(_relu(norm(x)), wt[f"{p}.res{r}.a.w"], wt[f"{p}.res{r}.a.b"])
            y = conv2d(_relu(norm(y)), wt[f"{p}.res{r}.b.w"], wt[f"{p}.res{r}.b.b"])
            return x + y

        x = conv2d(s0, wt[f"{p}.conv1.w"], wt[f"{p}.conv1.b"], stride=2)
        x = res(res(x, 1), 2)
        x = conv2d(np.concatenate([x, s1]), wt[f"{p}.down.w"], wt[f"{p}.down.b"], stride=2)
        x = res(res(x, 3), 4)
        x = conv2d(np.concatenate([x, s2]), wt[f"{p}.out.w"], wt[f"{p}.out.b"])
        return norm(x) if head == "m" else x

    # -- composition ----------------------------------------------------

    def encode_next(self, state: FusionState, sample: SensorSample, heads=None):
        """Advance the state by one sample and compute the requested heads."""
        if sample.timestamp < state.last_timestamp:
            raise OrderingError(f"sample at t={sample.timestamp} precedes state time {state.last_timestamp}")
        heads = self.heads if heads is None else tuple(heads)
        t0 = time.perf_counter()
        feats = self.sensor_encode(sample)
        self._tick("sensor_encode", t0)
        t0 = time.perf_counter()
        new_h, new_c = self.intra_sensor_fuse(state, sample.sensor, feats)
        self._tick("intra_sensor_fuse", t0)
        t0 = time.perf_counter()
        hs = [new_h[(sample.sensor, s)] for s in range(3)]
        sigma = self.inter_sensor_fuse(state, sample.sensor, hs)
        self._tick("inter_sensor_fuse", t0)
        out = {}
        for hd in ("m", "c"):
            if hd in heads:
                t0 = time.perf_counter()
                out[hd] = self.multiscale_fuse(sigma, hd)
                self._tick(f"msf_{'matching' if hd == 'm' else 'context'}", t0)
        new_state = FusionState(new_h, new_c, sigma, float(sample.timestamp))
        return new_state, FeatureMaps(out.get("m"), out.get("c"), float(sample.timestamp))


def bench_encoder(height=480, width=640, n_samples=20, workers=8, seed=0, reference=True,
                  cfg: EncoderConfig = EncoderConfig(), heads=("m", "c")):
    """Time ``encode_next`` per stage and the pixel-wise stages against the
    serial per-pixel reference.  Returns a JSON-ready dict (milliseconds)."""
    from ._reference import sequential_pixel_stages

    rng = np.random.default_rng(seed)
    enc = RampEncoder(height, width, cfg=cfg, workers=workers, seed=seed, heads=heads)
    state = enc.reset()
    samples = []
    for n in range(n_samples):
        if n % 3 == 0:
            payload = rng.uniform(0, 1, (cfg.image_channels, height, width))
            samples.append(SensorSample(float(n), "image", payload))
        else:
            payload = rng.integers(-2, 3, (N_BINS, height, width)).astype(np.float32)
            samples.append(SensorSample(float(n), "events", payload))
    enc.timings = {}
    t_total = time.perf_counter()
    for smp in samples:
        state, _ = enc.encode_next(state, smp)
    t_total = time.perf_counter() - t_total
    stages = {k: 1e3 * v / n_samples for k, v in enc.timings.items()}
    enc.close()
    report = {
        "height": height, "width": width, "samples": n_samples, "workers": workers,
        "stages_ms": stages,
        "total_ms": 1e3 * t_total / n_samples,
        "heads": list(heads),
        "pixel_parallel_ms": stages["intra_sensor_fuse"] + stages["inter_sensor_fuse"],
    }
    if reference:
        ref_enc = RampEncoder(height, width, cfg=cfg, workers=1, seed=seed)
        ref_state = ref_enc.reset()
        sequential_pixel_stages(ref_enc, ref_state, samples[0])  # JIT warm-up
        t_ref = 0.0
        for smp in samples:
            feats = ref_enc.sensor_encode(smp)
            t0 = time.perf_counter()
            ref_state = sequential_pixel_stages(ref_enc, ref_state, smp, feats)
            t_ref += time.perf_counter() - t0
        report["reference_pixel_ms"] = 1e3 * t_ref / n_samples
        report["speedup_vs_reference"] = report["reference_pixel_ms"] / report["pixel_parallel_ms"]
        ref_enc.close()
    return report
