"""
The VidHRFormer block and what it is measured against.

A block runs four sublayers, each wrapped in a residual with a layer
norm (pre-norm by default):

    local spatial MHSA -> Conv FFN -> temporal MHSA -> MLP FFN

The first two see `[(N T), Hf, Wf, D]`, the last two `[(N Hf Wf), T, D]`.

`fsta_layer` is plain dense attention over every `(t, row, col)` position.
With the masks from `same_window_mask` / `same_location_mask` it computes
exactly what the factorized layers compute, which is how the factorized
layers are tested. Without a mask it is the full spatio-temporal
attention ablation.

`flops_estimate` is the analytic cost model.
"""

from dataclasses import dataclass, fields

from einops import rearrange
import torch
from torch import nn

from pyvptr.core import ShapeError, ConfigError, Variant, fold_spatial, unfold_spatial
from pyvptr.attention import (
    MultiHeadAttention,
    PosEnc,
    make_posenc,
    mha,
    local_spatial_mhsa,
    temporal_mhsa,
)


class ConvFFN(nn.Module):
    """3x3 depth-wise conv, layer norm, then two point-wise MLPs with GELU."""

    def __init__(self, d_model, d_ff=None):
        super().__init__()
        d_ff = d_ff or 4 * d_model
        self.depthwise = nn.Conv2d(d_model, d_model, kernel_size=3, padding=1, groups=d_model)
        self.norm = nn.LayerNorm(d_model)
        self.mlp1 = nn.Linear(d_model, d_ff)
        self.act = nn.GELU()
        self.mlp2 = nn.Linear(d_ff, d_model)

    def forward(self, z):
        if z.ndim != 4 or z.shape[-1] != self.mlp1.in_features:
            raise ShapeError(f"ConvFFN expects [NT, Hf, Wf, {self.mlp1.in_features}], got {tuple(z.shape)}")
        x = rearrange(z, "b h w d -> b d h w")
        x = rearrange(self.depthwise(x), "b d h w -> b h w d")
        return self.mlp2(self.act(self.mlp1(self.norm(x))))


def conv_ffn(z, params):
    return params(z)


class MLPFFN(nn.Module):
    def __init__(self, d_model, d_ff=None):
        super().__init__()
        d_ff = d_ff or 4 * d_model
        self.net = nn.Sequential(nn.Linear(d_model, d_ff), nn.GELU(), nn.Linear(d_ff, d_model))

    def forward(self, x):
        return self.net(x)


class Sublayer(nn.Module):
    def __init__(self, d_model, norm="pre"):
        super().__init__()
        if norm not in ("pre", "post"):
            raise ConfigError(f"Unknown norm placement {norm!r}, expected 'pre' or 'post'")
        self.placement = norm
        self.norm = nn.LayerNorm(d_model)

    def forward(self, x, fn):
        if self.placement == "pre":
            return x + fn(self.norm(x))
        return self.norm(x + fn(x))


class VidHRFormerBlock(nn.Module):
    """Factorized spatio-temporal transformer block on `[N, T, Hf, Wf, D]`.

    `posenc` picks the spatial encoding (`abs2d` or `rpe2d`); temporal
    attention always uses the fixed 1D sine table of length `max_len`.
    """

    def __init__(
        self,
        d_model=64,
        heads=8,
        window=4,
        feature_size=(8, 8),
        max_len=64,
        posenc="abs2d",
        norm="pre",
        d_ff=None,
    ):
        super().__init__()
        height, width = feature_size
        if height % window or width % window:
            raise ShapeError(f"Window size {window} does not divide feature map {height}x{width}")
        self.d_model = d_model
        self.window = window
        self.feature_size = (height, width)

        self.spatial = MultiHeadAttention(d_model, heads)
        if PosEnc(posenc) is PosEnc.rpe2d:
            self.spatial_pos = make_posenc(PosEnc.rpe2d, (window, window), d_model, heads=heads)
        elif PosEnc(posenc) is PosEnc.abs2d:
            self.spatial_pos = make_posenc(PosEnc.abs2d, (height, width), d_model)
        else:
            self.spatial_pos = None
        self.conv_ffn = ConvFFN(d_model, d_ff)
        self.temporal = MultiHeadAttention(d_model, heads)
        self.temporal_pos = make_posenc(PosEnc.abs1d, (max_len,), d_model)
        self.out_ffn = MLPFFN(d_model, d_ff)

        self.norms = nn.ModuleList([Sublayer(d_model, norm) for _ in range(4)])

    def check_input(self, z):
        if z.ndim != 5 or tuple(z.shape[2:]) != (*self.feature_size, self.d_model):
            raise ShapeError(
                f"Block expects [N, T, {self.feature_size[0]}, {self.feature_size[1]}, {self.d_model}], "
                f"got {tuple(z.shape)}"
            )

    def spatial_stage(self, z):
        batch = z.shape[0]
        x = fold_spatial(z)
        x = self.norms[0](x, lambda y: local_spatial_mhsa(y, self.spatial, self.spatial_pos, self.window))
        x = self.norms[1](x, self.conv_ffn)
        return unfold_spatial(x, batch)

    def forward(self, z, temporal_mask=None):
        self.check_input(z)
        z = self.spatial_stage(z)
        z = self.norms[2](z, lambda y: temporal_mhsa(y, self.temporal, self.temporal_pos, temporal_mask))
        return self.norms[3](z, self.out_ffn)


def vidhrformer_block(z, params, temporal_mask=None):
    return params(z, temporal_mask=temporal_mask)


def flat_positions(z):
    """`[N, T, Hf, Wf, D]` -> `[N, T*Hf*Wf, D]`, time outer, then rows, then columns."""
    return rearrange(z, "n t h w d -> n (t h w) d")


def _grid(length, height, width):
    t, r, c = torch.meshgrid(torch.arange(length), torch.arange(height), torch.arange(width), indexing="ij")
    return t.flatten(), r.flatten(), c.flatten()


def same_window_mask(length, height, width, window):
    """Dense `[THW, THW]` mask allowing pairs in the same frame and the same KxK tile."""
    t, r, c = _grid(length, height, width)
    tile = (r // window) * (width // window) + c // window
    return (t[:, None] == t[None, :]) & (tile[:, None] == tile[None, :])


def same_location_mask(length, height, width, causal=False):
    """Dense `[THW, THW]` mask allowing pairs at the same spatial location."""
    t, r, c = _grid(length, height, width)
    allowed = (r[:, None] == r[None, :]) & (c[:, None] == c[None, :])
    if causal:
        allowed &= t[None, :] <= t[:, None]
    return allowed


def causal_location_mask(length, height, width):
    return same_location_mask(length, height, width, causal=True)


def fsta_layer(z, params, mask=None, memory=None, qk_pos=None, memory_pos=None):
    """Dense attention over all `T*Hf*Wf` positions of `z`.

    With `memory` the keys and values come from `memory` instead
    (encoder-decoder use). `qk_pos` is broadcast against `z` and added to
    queries (and to keys when attending to itself); `memory_pos` likewise
    for memory keys.
    """
    if z.ndim != 5:
        raise ShapeError(f"fsta_layer expects [N, T, Hf, Wf, D], got {tuple(z.shape)}")
    batch, length, height, width, _ = z.shape
    source = z if memory is None else memory
    if source.shape[0] != batch or source.shape[2:] != z.shape[2:]:
        raise ShapeError(f"Cannot attend from {tuple(z.shape)} to {tuple(source.shape)}")
    q = z if qk_pos is None else z + qk_pos
    if memory is None:
        k = q
    else:
        k = memory if memory_pos is None else memory + memory_pos
    out = mha(flat_positions(q), flat_positions(k), flat_positions(source), params, mask=mask)
    return rearrange(out, "n (t h w) d -> n t h w d", t=length, h=height, w=width)


class FSTALayer(nn.Module):
    def __init__(self, d_model, heads):
        super().__init__()
        self.attention = MultiHeadAttention(d_model, heads)

    def forward(self, z, mask=None, memory=None, qk_pos=None, memory_pos=None):
        return fsta_layer(z, self.attention, mask=mask, memory=memory, qk_pos=qk_pos, memory_pos=memory_pos)


@dataclass
class ComplexityReport:
    """FLOP counts per component.

    Attention terms follow the closed forms of the block (multiplies of
    the score and apply matmuls, `2*K^4*D` per window); projection and
    FFN terms count 2 FLOPs per multiply-accumulate.
    """

    spatial: float = 0
    temporal: float = 0
    cross: float = 0
    projection: float = 0
    ffn: float = 0
    autoencoder: float = 0
    dense_equivalent: float = 0
    spatial_per_window: float = 0

    @property
    def attention(self):
        return self.spatial + self.temporal + self.cross

    @property
    def total(self):
        return self.spatial + self.temporal + self.cross + self.projection + self.ffn + self.autoencoder

    def __add__(self, other):
        values = {f.name: getattr(self, f.name) + getattr(other, f.name) for f in fields(self)}
        # the cost of one window, not a running total
        values["spatial_per_window"] = max(self.spatial_per_window, other.spatial_per_window)
        return ComplexityReport(**values)

    def scaled(self, factor):
        values = {f.name: getattr(self, f.name) * factor for f in fields(self)}
        values["spatial_per_window"] = self.spatial_per_window
        return ComplexityReport(**values)

    def rows(self):
        out = [(f.name, getattr(self, f.name)) for f in fields(self)]
        out.append(("total", self.total))
        return out


def block_flops(batch, length, height, width, d_model, window, heads=8, d_ff=None, rpe=False):
    if height % window or width % window:
        raise ShapeError(f"Window size {window} does not divide feature map {height}x{width}")
    d_ff = d_ff or 4 * d_model
    tokens = batch * length * height * width
    patches = height * width // window**2
    per_window = window**4 * d_model * 2
    spatial = batch * length * patches * per_window
    if rpe:
        spatial += batch * length * patches * heads * window**4
    temporal = batch * height * width * length**2 * d_model * 2
    # q, k, v, o for both attentions
    projection = 2 * tokens * 4 * d_model * d_model * 2
    ffn = tokens * 9 * d_model * 2 + 2 * (tokens * 2 * d_model * d_ff * 2)
    dense = batch * (length * height * width) ** 2 * d_model * 2
    return ComplexityReport(
        spatial=spatial,
        temporal=temporal,
        projection=projection,
        ffn=ffn,
        dense_equivalent=dense,
        spatial_per_window=per_window,
    )


def decoder_layer_flops(batch, length, memory_length, height, width, d_model, window, heads=8, d_ff=None, rpe=False, fsta=False):
    d_ff = d_ff or 4 * d_model
    report = block_flops(batch, length, height, width, d_model, window, heads, d_ff, rpe)
    tokens = batch * length * height * width
    memory_tokens = batch * memory_length * height * width
    if fsta:
        cross = batch * (length * height * width) * (memory_length * height * width) * d_model * 2
    else:
        cross = batch * height * width * length * memory_length * d_model * 2
    projection = (2 * tokens + 2 * memory_tokens) * d_model * d_model * 2
    ffn = tokens * 9 * d_model * 2 + tokens * 2 * d_model * d_ff * 2
    return report + ComplexityReport(cross=cross, projection=projection, ffn=ffn)


def conv_flops(pixels, c_in, c_out, kernel):
    return pixels * c_in * c_out * kernel * kernel * 2


def autoencoder_flops(channels=1, d_model=64, res_blocks=2, frame_size=64):
    widths = [channels, d_model // 4, d_model // 2, d_model]
    encode = 0
    size = frame_size
    for c_in, c_out in zip(widths, widths[1:]):
        size //= 2
        encode += conv_flops(size * size, c_in, c_out, 4)
    residual = res_blocks * 2 * conv_flops(size * size, d_model, d_model, 3)
    encode += residual
    decode = residual
    for c_in, c_out in ((d_model, d_model // 2), (d_model // 2, d_model // 4), (d_model // 4, d_model // 4)):
        decode += conv_flops(size * size, c_in, c_out, 4)
        size *= 2
    decode += conv_flops(size * size, d_model // 4, channels, 3)
    return encode, decode


def flops_estimate(cfg, batch=1, mode="rip", include_autoencoder=False, autoencoder=None):
    """Inference cost of predicting `cfg.future` frames from `cfg.past`.

    Autoregressive variants are charged for recomputing the whole
    sequence at every step (no key-value cache). RIP and RIL cost the
    same in the transformer; with `include_autoencoder` the frame
    encoder and decoder are counted too, and RIP pays one extra encode
    per predicted frame. `autoencoder` is a `(channels, d_model,
    res_blocks)` triple, by default matching `cfg.d_model`.
    """
    if mode not in ("rip", "ril", "block"):
        raise ConfigError(f"Unknown inference mode {mode!r}")
    height, width = cfg.feature_size
    common = dict(d_model=cfg.d_model, window=cfg.window, heads=cfg.heads, d_ff=cfg.d_ff, rpe=cfg.posenc == "rpe2d")
    variant = Variant(cfg.variant)
    report = ComplexityReport()
    if variant is Variant.far:
        for step in range(cfg.future):
            length = cfg.past + step
            report += block_flops(batch, length, height, width, **common).scaled(cfg.layers_far)
    else:
        report += block_flops(batch, cfg.past, height, width, **common).scaled(cfg.layers_enc)
        fsta = cfg.cross_attention == "fsta"
        if variant is Variant.par:
            for step in range(cfg.future):
                layer = decoder_layer_flops(batch, step + 1, cfg.past, height, width, fsta=fsta, **common)
                report += layer.scaled(cfg.layers_dec)
        else:
            layer = decoder_layer_flops(batch, cfg.future, cfg.past, height, width, fsta=fsta, **common)
            report += layer.scaled(cfg.layers_dec)
    if include_autoencoder:
        encode, decode = autoencoder_flops(*(autoencoder or (1, cfg.d_model, 2)))
        encodes = cfg.past + (cfg.future if mode == "rip" and variant is not Variant.nar else 0)
        report += ComplexityReport(autoencoder=batch * (encodes * encode + cfg.future * decode))
    return report


def attention_ratio(length, height, width, d_model, window):
    report = block_flops(1, length, height, width, d_model, window)
    return report.dense_equivalent / (report.spatial + report.temporal)
