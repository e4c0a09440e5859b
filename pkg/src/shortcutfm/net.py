"""Step-conditioned velocity network with hand-written reverse mode and Adam.

The network maps a batch of complex states ``x`` (B, F, T), the noisy
observation ``y`` (B, F, T), a time ``t`` and a step size ``dt`` to a
velocity-scale field of the same shape as ``x``. It works frame by frame
with a small temporal context: each row of the MLP sees the real and
imaginary parts of ``x`` and ``y`` (plus, by default, their log magnitudes)
for frames ``j - context .. j + context``.

Layout::

    h   = W_in [features ; emb] + b_in
    h  += W2 silu(W1 silu(h) + C emb + b1) + b2        (n_blocks times)
    a, gx, gy = W_out silu(h) + b_out                    (zero-initialized)
    out = a + gx * x + gy * y                            (gain head)

``emb`` concatenates sinusoidal embeddings of ``t`` and of ``-log2(dt)/8``.
With ``gain_head`` the output layer also emits real per-bin gains applied
to the centre frame of ``x`` and ``y``, which makes mask-like (Wiener-type)
velocities cheap to represent; without it ``out = a``.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FormatError, StateError, TrainingError

DT_LOG_SCALE = 8.0
MAG_FLOOR = 1e-2


class TimeEmbedding:
    """Sinusoidal features on a geometric frequency ladder.

    The lowest frequency is 1/2 cycle per unit, so the (sin, cos) pair of
    that rung alone is injective on [0, 1].
    """

    def __init__(self, dim: int = 16, max_freq: float = 64.0):
        if dim <= 0 or dim % 2:
            raise ContractError("embedding dim must be a positive even integer")
        self.dim = dim
        half = dim // 2
        if half == 1:
            self.freqs = np.array([0.5])
        else:
            self.freqs = 0.5 * (2.0 * max_freq) ** (np.arange(half) / (half - 1))

    def __call__(self, u) -> np.ndarray:
        u = np.atleast_1d(np.asarray(u, dtype=np.float64))
        ang = 2.0 * np.pi * u[:, None] * self.freqs[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def dt_code(dt) -> np.ndarray:
    """Map step sizes to the embedding coordinate: 0 for dt=1, 7/8 for dt=1/128."""
    return -np.log2(np.asarray(dt, dtype=np.float64)) / DT_LOG_SCALE


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu(x):
    return x * _sigmoid(x)


def _dsilu(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def as_batch(a) -> np.ndarray:
    """Accept (F, T), (B, F, T) arrays or objects carrying ``.bins``."""
    a = getattr(a, "bins", a)
    a = np.asarray(a)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise ContractError(f"expected (F, T) or (B, F, T) array, got shape {a.shape}")
    return a


@dataclass
class Architecture:
    n_freq: int
    context: int = 1
    hidden: int = 256
    n_blocks: int = 3
    embed_dim: int = 16
    dtype: str = "float64"
    gain_head: bool = True
    log_magnitude: bool = True

    @property
    def channels(self) -> int:
        return (6 if self.log_magnitude else 4) * self.n_freq

    @property
    def in_features(self) -> int:
        return self.channels * (2 * self.context + 1)

    @property
    def emb_features(self) -> int:
        return 2 * self.embed_dim

    def to_dict(self) -> dict:
        return dict(n_freq=self.n_freq, context=self.context, hidden=self.hidden,
                    n_blocks=self.n_blocks, embed_dim=self.embed_dim, dtype=self.dtype,
                    gain_head=self.gain_head, log_magnitude=self.log_magnitude)

    @property
    def out_features(self) -> int:
        return (4 if self.gain_head else 2) * self.n_freq

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        H, E, Fo = self.hidden, self.emb_features, self.out_features
        shapes = [("in_w", (H, self.in_features + E)), ("in_b", (H,))]
        for i in range(self.n_blocks):
            shapes += [(f"blk{i}_w1", (H, H)), (f"blk{i}_c", (H, E)), (f"blk{i}_b1", (H,)),
                       (f"blk{i}_w2", (H, H)), (f"blk{i}_b2", (H,))]
        shapes += [("out_w", (Fo, H)), ("out_b", (Fo,))]
        return shapes


def _views(flat: np.ndarray, layout) -> dict[str, np.ndarray]:
    out, pos = {}, 0
    for name, shape in layout:
        size = int(np.prod(shape))
        out[name] = flat[pos:pos + size].reshape(shape)
        pos += size
    return out


class VelocityNet:
    """f(x, t, dt, y): one parameter vector serves every (t, dt).

    ``params`` and ``grad`` are flat arrays; ``p`` / ``g`` hold named views
    into them. Forward passes with ``record=False`` do not touch instance
    state and may run concurrently.
    """

    def __init__(self, arch: Architecture, seed: int = 0, zero_output: bool = True):
        self.arch = arch
        self.dtype = np.dtype(arch.dtype)
        self.embedding = TimeEmbedding(arch.embed_dim)
        layout = arch.layout()
        n = sum(int(np.prod(s)) for _, s in layout)
        self.params = np.zeros(n, dtype=self.dtype)
        self.grad = np.zeros(n, dtype=self.dtype)
        self.p = _views(self.params, layout)
        self.g = _views(self.grad, layout)
        self._tape = None
        self._init(np.random.default_rng(seed), zero_output)

    @classmethod
    def create(cls, n_freq: int, seed: int = 0, **kw) -> "VelocityNet":
        zero_output = kw.pop("zero_output", True)
        return cls(Architecture(n_freq=n_freq, **kw), seed=seed, zero_output=zero_output)

    def _init(self, rng, zero_output):
        a = self.arch
        H, E = a.hidden, a.emb_features
        p = self.p
        p["in_w"][:] = rng.standard_normal(p["in_w"].shape) / np.sqrt(a.in_features + E)
        for i in range(a.n_blocks):
            p[f"blk{i}_w1"][:] = rng.standard_normal((H, H)) / np.sqrt(H)
            p[f"blk{i}_c"][:] = rng.standard_normal((H, E)) / np.sqrt(E)
            p[f"blk{i}_w2"][:] = 0.5 * rng.standard_normal((H, H)) / np.sqrt(H)
        if not zero_output:
            p["out_w"][:] = rng.standard_normal(p["out_w"].shape) / np.sqrt(H)
            p["out_b"][:] = 0.1 * rng.standard_normal(p["out_b"].shape)

    @property
    def n_params(self) -> int:
        return self.params.size

    def conditioning(self, t, dt) -> np.ndarray:
        return np.concatenate([self.embedding(t), self.embedding(dt_code(dt))], axis=1)

    def _features(self, x, y):
        c = self.arch.context
        parts = [x.real, x.imag, y.real, y.imag]
        if self.arch.log_magnitude:
            parts += [np.log(np.abs(x) + MAG_FLOOR), np.log(np.abs(y) + MAG_FLOOR)]
        stacked = np.concatenate(parts, axis=1).astype(self.dtype, copy=False)
        B, C, T = stacked.shape
        padded = np.pad(stacked, ((0, 0), (0, 0), (c, c)))
        win = np.stack([padded[:, :, k:k + T] for k in range(2 * c + 1)], axis=1)
        return win.transpose(0, 3, 1, 2).reshape(B * T, (2 * c + 1) * C)

    def forward(self, x, t, dt, y, record: bool = False) -> np.ndarray:
        x, y = as_batch(x), as_batch(y)
        if x.shape != y.shape:
            raise ContractError(f"x shape {x.shape} does not match y shape {y.shape}")
        B, F, T = x.shape
        if F != self.arch.n_freq:
            raise ContractError(f"network expects {self.arch.n_freq} frequency bins, got {F}")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        dt = np.broadcast_to(np.asarray(dt, dtype=np.float64), (B,))
        if np.any(t < 0) or np.any(t > 1):
            raise ContractError("t must lie in [0, 1]")
        if np.any(dt <= 0) or np.any(dt > 1):
            raise ContractError("dt must lie in (0, 1]")

        p = self.p
        emb = np.repeat(self.conditioning(t, dt).astype(self.dtype), T, axis=0)
        a0 = np.concatenate([self._features(x, y), emb], axis=1)
        h = a0 @ p["in_w"].T + p["in_b"]
        blocks = []
        for i in range(self.arch.n_blocks):
            s1 = _silu(h)
            z = s1 @ p[f"blk{i}_w1"].T + emb @ p[f"blk{i}_c"].T + p[f"blk{i}_b1"]
            s2 = _silu(z)
            blocks.append((h, s1, z, s2))
            h = h + s2 @ p[f"blk{i}_w2"].T + p[f"blk{i}_b2"]
        s_out = _silu(h)
        o = s_out @ p["out_w"].T + p["out_b"]
        if record:
            self._tape = (B, F, T, a0, emb, blocks, h, s_out, x, y)
        o = o.reshape(B, T, -1).astype(np.float64).transpose(0, 2, 1)
        out = o[:, :F] + 1j * o[:, F:2 * F]
        if self.arch.gain_head:
            out = out + o[:, 2 * F:3 * F] * x + o[:, 3 * F:] * y
        return out

    __call__ = forward

    def backward(self, cotangent) -> np.ndarray:
        """Accumulate d(loss)/d(params) into ``grad``.

        ``cotangent`` is d(loss)/d(Re out) + 1j * d(loss)/d(Im out), shaped
        like the recorded output. Consumes the tape.
        """
        if self._tape is None:
            raise StateError("backward called without a recorded forward pass")
        B, F, T, a0, emb, blocks, h, s_out, x, y = self._tape
        self._tape = None
        cot = as_batch(cotangent)
        if cot.shape != (B, F, T):
            raise ContractError(f"cotangent shape {cot.shape} does not match output {(B, F, T)}")
        parts = [cot.real, cot.imag]
        if self.arch.gain_head:
            # d out / d gain = the (complex) signal it multiplies
            parts += [(cot * np.conj(x)).real, (cot * np.conj(y)).real]
        go = np.concatenate(parts, axis=1).transpose(0, 2, 1).reshape(B * T, -1).astype(self.dtype)

        p, g = self.p, self.g
        g["out_w"] += go.T @ s_out
        g["out_b"] += go.sum(axis=0)
        gh = (go @ p["out_w"]) * _dsilu(h)
        for i in reversed(range(self.arch.n_blocks)):
            h_in, s1, z, s2 = blocks[i]
            g[f"blk{i}_b2"] += gh.sum(axis=0)
            g[f"blk{i}_w2"] += gh.T @ s2
            gz = (gh @ p[f"blk{i}_w2"]) * _dsilu(z)
            g[f"blk{i}_w1"] += gz.T @ s1
            g[f"blk{i}_c"] += gz.T @ emb
            g[f"blk{i}_b1"] += gz.sum(axis=0)
            gh = gh + (gz @ p[f"blk{i}_w1"]) * _dsilu(h_in)
        g["in_w"] += gh.T @ a0
        g["in_b"] += gh.sum(axis=0)
        return self.grad

    def zero_grad(self):
        self.grad[:] = 0

    def copy(self) -> "VelocityNet":
        other = VelocityNet.__new__(VelocityNet)
        other.arch = Architecture(**self.arch.to_dict())
        other.dtype = self.dtype
        other.embedding = TimeEmbedding(self.arch.embed_dim)
        other.params = self.params.copy()
        other.grad = self.grad.copy()
        layout = self.arch.layout()
        other.p = _views(other.params, layout)
        other.g = _views(other.grad, layout)
        other._tape = None
        return other


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def bind(self, net: VelocityNet) -> "AdamState":
        if self.m is None:
            self.m = np.zeros_like(net.params)
            self.v = np.zeros_like(net.params)
        return self


def adam_step(opt: AdamState, net: VelocityNet) -> VelocityNet:
    """Bias-corrected Adam update of ``net.params`` from ``net.grad``; clears ``grad``."""
    opt.bind(net)
    g = net.grad
    if not np.all(np.isfinite(g)):
        raise TrainingError("non-finite gradient", step=opt.step + 1)
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    opt.m *= b1
    opt.m += (1.0 - b1) * g
    opt.v *= b2
    opt.v += (1.0 - b2) * (g * g)
    m_hat = opt.m / (1.0 - b1 ** opt.step)
    v_hat = opt.v / (1.0 - b2 ** opt.step)
    net.params -= (opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)).astype(net.dtype)
    net.zero_grad()
    return net


# ---------------------------------------------------------------------------
# checkpoint
#
# Little-endian layout:
#   8s   magic b"SCFMCKPT"
#   u32  format version (1)
#   u32  n, then n bytes UTF-8 JSON: {"arch": {...}, "meta": {...}}
#   u64  parameter count P, then P values of arch.dtype ('<f4' or '<f8')
#   u8   optimizer flag; if 1: u64 step, 4 x f64 (lr, beta1, beta2, eps),
#        then m and v as P values each of arch.dtype
#   u32  n, then n bytes UTF-8 JSON of the numpy bit-generator state (n = 0: none)
#   u32  CRC-32 of every preceding byte

MAGIC = b"SCFMCKPT"
FORMAT_VERSION = 1


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True).encode("utf-8")


def checkpoint_bytes(net: VelocityNet, opt: AdamState | None = None,
                     rng: np.random.Generator | None = None, meta: dict | None = None) -> bytes:
    le = net.params.dtype.newbyteorder("<")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    desc = _json_bytes({"arch": net.arch.to_dict(), "meta": meta or {}})
    parts += [struct.pack("<I", len(desc)), desc]
    parts += [struct.pack("<Q", net.params.size), net.params.astype(le).tobytes()]
    if opt is not None and opt.m is not None:
        parts += [b"\x01", struct.pack("<Q4d", opt.step, opt.lr, opt.beta1, opt.beta2, opt.eps),
                  opt.m.astype(le).tobytes(), opt.v.astype(le).tobytes()]
    else:
        parts.append(b"\x00")
    state = _json_bytes(rng.bit_generator.state) if rng is not None else b""
    parts += [struct.pack("<I", len(state)), state]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path, net, opt=None, rng=None, meta=None) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(net, opt, rng, meta))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("checkpoint truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_from_bytes(buf: bytes):
    """Inverse of :func:`checkpoint_bytes`: returns ``(net, opt, rng, meta)``."""
    if len(buf) < 16 or buf[:8] != MAGIC:
        raise FormatError("not a shortcutfm checkpoint (bad magic)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("checkpoint checksum mismatch")
    r = _Reader(body)
    r.take(8)
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint format version {version} (expected {FORMAT_VERSION})")
    (n,) = r.unpack("<I")
    desc = json.loads(r.take(n))
    arch = Architecture(**desc["arch"])
    le = np.dtype(arch.dtype).newbyteorder("<")
    (count,) = r.unpack("<Q")
    net = VelocityNet(arch)
    if count != net.n_params:
        raise FormatError(f"parameter count {count} does not match architecture ({net.n_params})")
    net.params[:] = np.frombuffer(r.take(count * le.itemsize), dtype=le)
    opt = None
    if r.take(1) == b"\x01":
        step, lr, b1, b2, eps = r.unpack("<Q4d")
        m = np.frombuffer(r.take(count * le.itemsize), dtype=le).astype(arch.dtype)
        v = np.frombuffer(r.take(count * le.itemsize), dtype=le).astype(arch.dtype)
        opt = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, step=step, m=m, v=v)
    (n,) = r.unpack("<I")
    rng = None
    if n:
        state = json.loads(r.take(n))
        bitgen = getattr(np.random, state["bit_generator"])()
        bitgen.state = state
        rng = np.random.Generator(bitgen)
    if r.pos != len(body):
        raise FormatError("trailing bytes in checkpoint")
    return net, opt, rng, desc.get("meta", {})


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    return checkpoint_from_bytes(buf)
