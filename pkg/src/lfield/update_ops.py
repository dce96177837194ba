"""Update operators for sparse MPI refinement and the coarse initializers.

Two interchangeable operators produce a 4 x k x H x W residual from a
sparse gradient slab: an analytic photometric gradient step and a small
3D convolutional network with a hand-rolled backward pass.

Network layout: B basic blocks (3x3x3 convolution, per-channel affine
scale/shift, rectifier), then a linear 1x1x1 convolution to 4 channels.
The alpha-channel residual is bounded with 4 * tanh so additive logit
updates cannot diverge. Per-channel affine replaces batch statistics,
which are meaningless at batch size one.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from lfield.geometry import NumericError, ParameterError
from lfield.mpi_core import Mpi, render_loss_gradients
from lfield.psv import Psv
from lfield.sparsify import SparseIndices, SparseVolume, _gather

CHECKPOINT_MAGIC = b"LFNW"
CHECKPOINT_VERSION = 1


@dataclass
class ConvBlock:
    weight: np.ndarray  # C_out x C_in x 3 x 3 x 3
    scale: np.ndarray   # C_out
    shift: np.ndarray   # C_out


@dataclass
class ConvNetParams:
    """Weights of the residual network; layer shapes chain from C_in to 4."""

    blocks: list
    final_weight: np.ndarray  # 4 x C_h x 1 x 1 x 1
    final_bias: np.ndarray    # 4

    @property
    def in_channels(self):
        return self.blocks[0].weight.shape[1] if self.blocks else self.final_weight.shape[1]

    def arrays(self):
        """Flat parameter list in a fixed order (optimizer / checkpoint order)."""
        out = []
        for b in self.blocks:
            out.extend([b.weight, b.scale, b.shift])
        out.extend([self.final_weight, self.final_bias])
        return out

    @staticmethod
    def from_arrays(arrays):
        if len(arrays) < 2 or (len(arrays) - 2) % 3 != 0:
            raise ParameterError("parameter list does not describe a conv net")
        blocks = [
            ConvBlock(arrays[i], arrays[i + 1], arrays[i + 2])
            for i in range(0, len(arrays) - 2, 3)
        ]
        return ConvNetParams(blocks, arrays[-2], arrays[-1])


def init_params(in_channels, hidden=16, num_blocks=5, out_channels=4, seed=0):
    """Uniform [-a, a] weights with a = sqrt(1 / fan_in); affine starts at identity."""
    rng = np.random.default_rng(seed)
    blocks = []
    c = in_channels
    for _ in range(num_blocks):
        a = np.sqrt(1.0 / (c * 27))
        blocks.append(
            ConvBlock(
                rng.uniform(-a, a, size=(hidden, c, 3, 3, 3)),
                np.ones(hidden),
                np.zeros(hidden),
            )
        )
        c = hidden
    a = np.sqrt(1.0 / c)
    final_w = rng.uniform(-a, a, size=(out_channels, c, 1, 1, 1))
    return ConvNetParams(blocks, final_w, np.zeros(out_channels))


def conv3d(x, weight):
    """3x3x3 (or 1x1x1) convolution, zero padded, stride 1, over C x Z x Y x X."""
    kz, ky, kx = weight.shape[2:]
    if kz == ky == kx == 1:
        return np.einsum("oi,izyx->ozyx", weight[:, :, 0, 0, 0], x)
    pz, py, px = kz // 2, ky // 2, kx // 2
    xp = np.pad(x, ((0, 0), (pz, pz), (py, py), (px, px)))
    z, y, w = x.shape[1:]
    out = np.zeros((weight.shape[0], z, y, w))
    for dz in range(kz):
        for dy in range(ky):
            for dx in range(kx):
                out += np.einsum(
                    "oi,izyx->ozyx",
                    weight[:, :, dz, dy, dx],
                    xp[:, dz : dz + z, dy : dy + y, dx : dx + w],
                )
    return out


def conv3d_vjp(x, weight, upstream):
    """Gradients of sum(upstream * conv3d(x, weight)) w.r.t. (x, weight)."""
    kz, ky, kx = weight.shape[2:]
    if kz == ky == kx == 1:
        dw = np.einsum("ozyx,izyx->oi", upstream, x)[:, :, None, None, None]
        dx = np.einsum("oi,ozyx->izyx", weight[:, :, 0, 0, 0], upstream)
        return dx, dw
    pz, py, px = kz // 2, ky // 2, kx // 2
    xp = np.pad(x, ((0, 0), (pz, pz), (py, py), (px, px)))
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(weight)
    z, y, w = x.shape[1:]
    for dz in range(kz):
        for dy in range(ky):
            for dx_ in range(kx):
                sl = (slice(None), slice(dz, dz + z), slice(dy, dy + y), slice(dx_, dx_ + w))
                dw[:, :, dz, dy, dx_] = np.einsum("ozyx,izyx->oi", upstream, xp[sl])
                dxp[sl] += np.einsum("oi,ozyx->izyx", weight[:, :, dz, dy, dx_], upstream)
    dx = dxp[:, pz : pz + z, py : py + y, px : px + w]
    return dx, dw


def _stack_forward(params: ConvNetParams, x, tape=None):
    for i, b in enumerate(params.blocks):
        conv = conv3d(x, b.weight)
        pre = b.scale[:, None, None, None] * conv + b.shift[:, None, None, None]
        y = np.maximum(pre, 0.0)
        if tape is not None:
            tape.append({"x": x, "conv": conv, "pre": pre})
        x = y
    raw = conv3d(x, params.final_weight) + params.final_bias[:, None, None, None]
    if tape is not None:
        tape.append({"x": x})
    return raw


def _stack_backward(params: ConvNetParams, tape, d_raw):
    grads = ConvNetParams(
        [ConvBlock(np.zeros_like(b.weight), np.zeros_like(b.scale), np.zeros_like(b.shift))
         for b in params.blocks],
        np.zeros_like(params.final_weight),
        np.zeros_like(params.final_bias),
    )
    grads.final_bias[:] = d_raw.sum(axis=(1, 2, 3))
    d_x, dw = conv3d_vjp(tape[-1]["x"], params.final_weight, d_raw)
    grads.final_weight[:] = dw
    for i in range(len(params.blocks) - 1, -1, -1):
        ctx, b, g = tape[i], params.blocks[i], grads.blocks[i]
        d_pre = d_x * (ctx["pre"] > 0.0)
        g.scale[:] = np.sum(d_pre * ctx["conv"], axis=(1, 2, 3))
        g.shift[:] = d_pre.sum(axis=(1, 2, 3))
        d_conv = d_pre * b.scale[:, None, None, None]
        d_x, dw = conv3d_vjp(ctx["x"], b.weight, d_conv)
        g.weight[:] = dw
    return grads, d_x


def _residual_head(raw):
    out = raw.copy()
    out[3] = 4.0 * np.tanh(raw[3])
    return out


def conv_forward(params: ConvNetParams, vs: SparseVolume, with_tape: bool = False):
    """Run the residual network on a sparse slab: C x k x H x W -> 4 x k x H x W.

    Color residual channels are linear; the alpha channel is 4 * tanh.
    """
    x = vs.data if isinstance(vs, SparseVolume) else vs
    if x.shape[0] != params.in_channels:
        raise ParameterError(
            f"input has {x.shape[0]} channels, params expect {params.in_channels}"
        )
    tape = [] if with_tape else None
    raw = _stack_forward(params, x, tape)
    out = _residual_head(raw)
    if not with_tape:
        return out
    return out, {"stack": tape, "raw_alpha": raw[3]}


def conv_backward(params: ConvNetParams, vs, upstream, tape=None):
    """Exact reverse-mode gradients of `conv_forward`: (d_params, d_input)."""
    if tape is None:
        _, tape = conv_forward(params, vs, with_tape=True)
    d_raw = np.asarray(upstream, dtype=np.float64).copy()
    th = np.tanh(tape["raw_alpha"])
    d_raw[3] = d_raw[3] * 4.0 * (1.0 - th * th)
    return _stack_backward(params, tape["stack"], d_raw)


def analytic_update(
    vs,
    s: SparseIndices,
    m: Mpi,
    views,
    step: float,
    alpha_rule: str = "logit",
    sparsity_weight: float = 0.0,
):
    """Photometric gradient-descent residual, gathered at the sparse indices.

    The residual is -step times the summed render-loss gradients over the
    source views. The alpha component is expressed in the update space of
    `restore_and_update` (logit by default). An optional sparsity term
    pushes alpha toward {0, 1}.
    """
    dense = analytic_residual_dense(m, views, step, alpha_rule, sparsity_weight)
    return _gather(dense, s.indices)


def analytic_residual_dense(
    m: Mpi,
    views,
    step: float,
    alpha_rule: str = "logit",
    sparsity_weight: float = 0.0,
):
    """Dense 4 x D x H x W residual field the analytic update gathers from."""
    if step <= 0:
        raise ParameterError(f"step must be positive, got {step}")
    d_color = np.zeros_like(m.color)
    d_alpha = np.zeros_like(m.alpha)
    for img, cam in views:
        dc, da = render_loss_gradients(m, cam, img)
        d_color += dc
        d_alpha += da
    if sparsity_weight > 0.0:
        # d/da of mean log(1.5 - |0.5 - a|): pushes alpha toward 0 or 1
        dev = m.alpha - 0.5
        d_alpha += sparsity_weight * -np.sign(dev) / ((1.5 - np.abs(dev)) * m.alpha.size)
    res_c = -step * np.moveaxis(d_color, -1, 0)
    if alpha_rule == "logit":
        # chain through the logit parameterization: dL/dz = dL/da * a * (1 - a)
        d_alpha = d_alpha * m.alpha * (1.0 - m.alpha)
    res_a = -step * d_alpha[None, ..., 0]
    return np.concatenate([res_c, res_a], axis=0)


def init_mpi_heuristic(p_coarse: Psv) -> Mpi:
    """Non-learned coarse MPI: mean color over views, photoconsistency alpha.

    Alpha is a per-pixel softmax over depth of the negative photometric
    variance across views, rescaled so the contributions sum to about 0.9.
    """
    data = p_coarse.data
    color = np.clip(data.mean(axis=0), 0.0, 1.0)
    var = data.var(axis=0).mean(axis=-1, keepdims=True)  # D x H x W x 1
    scaled = -var / max(var.std(), 1e-8)
    e = np.exp(scaled - scaled.max(axis=0, keepdims=True))
    weights = e / e.sum(axis=0, keepdims=True)
    alpha = _scale_alpha_to_mass(weights, 0.9)
    alpha = np.clip(alpha, 1e-3, 1.0 - 1e-3)
    return Mpi(color, alpha, p_coarse.depths, p_coarse.ref_camera)


def _scale_alpha_to_mass(weights, mass):
    """Per pixel, find s so that alpha = s * weights satisfies
    sum_d A_d = 1 - prod_d (1 - alpha_d) = mass (bisection, monotone in s)."""
    wmax = weights.max(axis=0, keepdims=True)
    lo = np.zeros_like(wmax)
    hi = (1.0 - 1e-6) / np.maximum(wmax, 1e-12)
    target = np.log1p(-mass)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        val = np.sum(np.log1p(-np.minimum(mid * weights, 1.0 - 1e-12)), axis=0, keepdims=True)
        too_low = val > target  # not enough opacity yet
        lo = np.where(too_low, mid, lo)
        hi = np.where(too_low, hi, mid)
    return np.clip(0.5 * (lo + hi) * weights, 0.0, 1.0)


def init_mpi_network(params: ConvNetParams, p_coarse: Psv, with_tape: bool = False):
    """Learned coarse MPI: conv stack on the reshaped PSV, sigmoid RGBA head."""
    n, d, hh, ww = p_coarse.data.shape[:4]
    x = np.moveaxis(p_coarse.data, -1, 1).reshape(3 * n, d, hh, ww)
    if x.shape[0] != params.in_channels:
        raise ParameterError(
            f"PSV provides {x.shape[0]} channels, params expect {params.in_channels}"
        )
    tape = [] if with_tape else None
    raw = _stack_forward(params, x, tape)
    rgba = 1.0 / (1.0 + np.exp(-raw))
    m = Mpi(
        np.moveaxis(rgba[:3], 0, -1),
        rgba[3][..., None],
        p_coarse.depths,
        p_coarse.ref_camera,
    )
    if not with_tape:
        return m
    return m, {"stack": tape, "rgba": rgba, "input": x}


def init_mpi_network_vjp(params, tape, d_color, d_alpha):
    """Backward pass of `init_mpi_network` onto the network parameters."""
    d_rgba = np.concatenate([np.moveaxis(d_color, -1, 0), d_alpha[None, ..., 0]])
    rgba = tape["rgba"]
    d_raw = d_rgba * rgba * (1.0 - rgba)
    grads, _ = _stack_backward(params, tape["stack"], d_raw)
    return grads


# --- checkpoint format -------------------------------------------------------
#
# magic (4 bytes) | version u32 | net count u32
# per net:  layer count u32
# per layer: ndim u32, dims u32 each, float32 little-endian payload

def save_checkpoint(path, nets):
    """Write a list of ConvNetParams to a versioned binary file."""
    nets = list(nets)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(nets))]
    for net in nets:
        arrays = net.arrays()
        chunks.append(struct.pack("<I", len(arrays)))
        for arr in arrays:
            a = np.ascontiguousarray(arr, dtype="<f4")
            chunks.append(struct.pack("<I", a.ndim))
            chunks.append(struct.pack(f"<{a.ndim}I", *a.shape))
            chunks.append(a.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path):
    """Read back a checkpoint written by `save_checkpoint`."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ParameterError(f"{path}: not a parameter checkpoint")
    version, net_count = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ParameterError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    nets = []
    for _ in range(net_count):
        (layer_count,) = struct.unpack_from("<I", buf, off)
        off += 4
        arrays = []
        for _ in range(layer_count):
            (ndim,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off)
            off += 4 * count
            arrays.append(arr.reshape(shape).astype(np.float64))
        nets.append(ConvNetParams.from_arrays(arrays))
    if off != len(buf):
        raise ParameterError(f"{path}: trailing bytes in checkpoint")
    return nets
