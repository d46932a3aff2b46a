"""
The three predictors built from VidHRFormer blocks.

- `VPTRFAR`: a stack of blocks with causal temporal attention, trained
  teacher-forced to predict every next feature map.
- `VPTRPAR`: an encoder over the past features and a causal decoder
  that attends to the encoder output (the memories) through cross-time
  attention, generating one future step per call.
- `VPTRNAR`: the same encoder-decoder without masks, whose decoder
  starts from zeros and learned future-frame queries and produces
  every future step in a single pass.

Features are `[N, T, Hf, Wf, D]` throughout. The recurrent inference
loops (`infer_rip`, `infer_ril`, `nar_blockwise`) work on pixels and
accept any callables for the encoder, decoder and predictor.
"""

from dataclasses import dataclass

from loguru import logger
import torch
from torch import nn

from pyvptr.attention import MultiHeadAttention, PosEnc, causal_mask, temporal_cross_mha, temporal_mhsa
from pyvptr.autoencoder import FEATURE_SIZE
from pyvptr.block import ConvFFN, FSTALayer, Sublayer, VidHRFormerBlock
from pyvptr.checkpoint import load_bundle, save_bundle, state_digest
from pyvptr.core import (
    CheckpointError,
    ConfigError,
    ModeError,
    ShapeError,
    Variant,
    as_tensor,
    fold_spatial,
    unfold_spatial,
)
from pyvptr.losses import LossWeights, variant_loss
from pyvptr.training import TrainConfig, fit

MODES = ("rip", "ril", "block")
QUERY_INJECTION = ("positional", "input")
CROSS_ATTENTION = ("temporal", "fsta")


@dataclass
class VPTRConfig:
    """The `[model]` section.

    Defaults are the desk-scale profile; `VPTRConfig.full()` gives the
    published sizes.
    """

    variant: str = "nar"
    past: int = 4
    future: int = 4
    layers_far: int = 4
    layers_enc: int = 2
    layers_dec: int = 2
    d_model: int = 64
    window: int = 4
    heads: int = 8
    posenc: str = "abs2d"
    norm: str = "pre"
    query_injection: str = "positional"
    memory_posenc: bool = True
    cross_attention: str = "temporal"
    max_len: int = 64
    seed: int = 0

    def __post_init__(self):
        Variant(self.variant)
        if self.past < 1 or self.future < 1:
            raise ConfigError(f"past and future must be >= 1, got {self.past} and {self.future}")
        if self.variant == "far" and self.layers_far < 1:
            raise ConfigError("FAR needs layers_far >= 1")
        if self.variant in ("par", "nar") and (self.layers_enc < 1 or self.layers_dec < 1):
            raise ConfigError(f"{self.variant.upper()} needs layers_enc and layers_dec >= 1")
        if PosEnc(self.posenc) not in (PosEnc.abs2d, PosEnc.rpe2d, PosEnc.none):
            raise ConfigError(f"Spatial positional encoding must be abs2d, rpe2d or none, got {self.posenc!r}")
        if self.norm not in ("pre", "post"):
            raise ConfigError(f"norm must be 'pre' or 'post', got {self.norm!r}")
        if self.query_injection not in QUERY_INJECTION:
            raise ConfigError(f"query_injection must be one of {QUERY_INJECTION}, got {self.query_injection!r}")
        if self.cross_attention not in CROSS_ATTENTION:
            raise ConfigError(f"cross_attention must be one of {CROSS_ATTENTION}, got {self.cross_attention!r}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if FEATURE_SIZE % self.window:
            raise ConfigError(f"window={self.window} does not divide the {FEATURE_SIZE}x{FEATURE_SIZE} feature map")
        if self.past + self.future > self.max_len:
            raise ConfigError(f"past + future = {self.past + self.future} exceeds max_len={self.max_len}")

    @classmethod
    def full(cls, **overrides):
        values = dict(past=10, future=10, layers_far=12, layers_enc=4, layers_dec=8, d_model=528, window=4, heads=8)
        values.update(overrides)
        return cls(**values)

    @property
    def feature_size(self):
        return (FEATURE_SIZE, FEATURE_SIZE)

    @property
    def d_ff(self):
        return 4 * self.d_model

    def block_kwargs(self):
        return dict(
            d_model=self.d_model,
            heads=self.heads,
            window=self.window,
            feature_size=self.feature_size,
            max_len=self.max_len,
            posenc=self.posenc,
            norm=self.norm,
        )


def final_norm(config):
    # pre-norm stacks leave the residual stream unnormalised
    return nn.LayerNorm(config.d_model) if config.norm == "pre" else nn.Identity()


class TransformerStack(nn.Module):
    def __init__(self, config, layers):
        super().__init__()
        self.blocks = nn.ModuleList([VidHRFormerBlock(**config.block_kwargs()) for _ in range(layers)])
        self.norm = final_norm(config)

    def forward(self, z, temporal_mask=None):
        for block in self.blocks:
            z = block(z, temporal_mask=temporal_mask)
        return self.norm(z)


class TransformerEncoder(TransformerStack):
    def __init__(self, config):
        super().__init__(config, config.layers_enc)


class VPTRFAR(nn.Module):
    variant = Variant.far

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.stack = TransformerStack(config, config.layers_far)

    def forward(self, z_in):
        """Teacher-forced next-step features: output `t` predicts input step `t+1`."""
        z_in = as_tensor(z_in)
        return self.stack(z_in, temporal_mask=causal_mask(z_in.shape[1], z_in.device))


class CrossAttention(nn.Module):
    def __init__(self, d_model, heads):
        super().__init__()
        self.attention = MultiHeadAttention(d_model, heads)


class DecoderLayer(VidHRFormerBlock):
    """A VidHRFormer block followed by cross-time attention on the memories and an output Conv FFN.

    Sublayer order: spatial MHSA, Conv FFN, temporal MHSA, cross-time
    MHA, MLP FFN, output Conv FFN.
    """

    def __init__(self, config):
        super().__init__(**config.block_kwargs())
        self.memory_posenc = config.memory_posenc
        if config.cross_attention == "fsta":
            self.cross = FSTALayer(config.d_model, config.heads)
        else:
            self.cross = CrossAttention(config.d_model, config.heads)
        self.output_ffn = ConvFFN(config.d_model, config.d_ff)
        self.cross_norm = Sublayer(config.d_model, config.norm)
        self.output_norm = Sublayer(config.d_model, config.norm)

    def attend_memory(self, z, memory, query_pos=None):
        # decoder step i stands for frame past+i, right after the memories
        start = memory.shape[1]
        if isinstance(self.cross, FSTALayer):
            times = self.temporal_pos.query_key_term(z.shape[1], start)[:, None, None, :]
            qk_pos = times if query_pos is None else times + query_pos
            memory_pos = None
            if self.memory_posenc:
                memory_pos = self.temporal_pos.query_key_term(memory.shape[1])[:, None, None, :]
            return self.cross(z, memory=memory, qk_pos=qk_pos, memory_pos=memory_pos)
        return temporal_cross_mha(
            z,
            memory,
            self.cross.attention,
            self.temporal_pos,
            query_pos=query_pos,
            memory_posenc=self.memory_posenc,
            query_start=start,
        )

    def output_stage(self, z):
        batch = z.shape[0]
        x = self.output_norm(fold_spatial(z), self.output_ffn)
        return unfold_spatial(x, batch)

    def forward(self, z, memory, temporal_mask=None, query_pos=None):
        self.check_input(z)
        z = self.spatial_stage(z)
        z = self.norms[2](
            z, lambda y: temporal_mhsa(y, self.temporal, self.temporal_pos, temporal_mask, query_pos=query_pos)
        )
        z = self.cross_norm(z, lambda y: self.attend_memory(y, memory, query_pos))
        z = self.norms[3](z, self.out_ffn)
        return self.output_stage(z)


class TransformerDecoder(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.layers = nn.ModuleList([DecoderLayer(config) for _ in range(config.layers_dec)])
        self.norm = final_norm(config)

    def forward(self, z, memory, temporal_mask=None, query_pos=None):
        for layer in self.layers:
            z = layer(z, memory, temporal_mask=temporal_mask, query_pos=query_pos)
        return self.norm(z)


def check_features(z, config, name):
    if z.ndim != 5 or tuple(z.shape[2:]) != (*config.feature_size, config.d_model):
        raise ShapeError(
            f"{name} must be [N, T, {FEATURE_SIZE}, {FEATURE_SIZE}, {config.d_model}], got {tuple(z.shape)}"
        )


class VPTRPAR(nn.Module):
    variant = Variant.par

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.encoder = TransformerEncoder(config)
        self.decoder = TransformerDecoder(config)

    def encode(self, src):
        check_features(src, self.config, "src")
        return self.encoder(src)

    def decode(self, tgt, memory):
        check_features(tgt, self.config, "tgt")
        if tgt.shape[0] != memory.shape[0]:
            raise ShapeError(f"Batch of tgt {tgt.shape[0]} differs from memories {memory.shape[0]}")
        return self.decoder(tgt, memory, temporal_mask=causal_mask(tgt.shape[1], tgt.device))

    def forward(self, src, tgt):
        return self.decode(as_tensor(tgt), self.encode(as_tensor(src)))


class VPTRNAR(nn.Module):
    variant = Variant.nar

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.encoder = TransformerEncoder(config)
        self.decoder = TransformerDecoder(config)
        self.queries = nn.Parameter(torch.empty(config.future, *config.feature_size, config.d_model))
        nn.init.normal_(self.queries, std=0.02)

    def forward(self, src, queries=None):
        src = as_tensor(src)
        check_features(src, self.config, "src")
        queries = self.queries if queries is None else queries
        if tuple(queries.shape) != tuple(self.queries.shape):
            raise ShapeError(f"Future queries must be {tuple(self.queries.shape)}, got {tuple(queries.shape)}")
        memory = self.encoder(src)
        stream = torch.zeros(src.shape[0], *queries.shape, dtype=src.dtype, device=src.device)
        if self.config.query_injection == "input":
            return self.decoder(stream + queries, memory)
        return self.decoder(stream, memory, query_pos=queries)


MODELS = {Variant.far: VPTRFAR, Variant.par: VPTRPAR, Variant.nar: VPTRNAR}


def build_model(config):
    torch.manual_seed(config.seed)
    return MODELS[Variant(config.variant)](config)


def far_forward(z_in, model):
    return model(z_in)


def par_forward(src, tgt, model):
    return model(src, tgt)


def nar_forward(src, model, queries=None):
    return model(src, queries)


def check_mode(variant, mode):
    """`block` needs NAR; `rip` and `ril` need FAR or PAR."""
    if mode not in MODES:
        raise ModeError(f"Unknown inference mode {mode!r}, expected one of {MODES}")
    variant = Variant(variant)
    if mode == "block" and variant is not Variant.nar:
        raise ModeError(f"Mode 'block' requires the nar variant, got {variant.value}")
    if mode in ("rip", "ril") and variant is Variant.nar:
        raise ModeError(f"Mode {mode!r} requires the far or par variant, got nar")


def model_variant(model, default=Variant.far):
    return Variant(getattr(model, "variant", default))


def _autoregress(past, encode, model, decode, steps, reencode):
    if steps < 1:
        raise ShapeError(f"steps must be >= 1, got {steps}")
    variant = model_variant(model)
    check_mode(variant, "rip" if reencode else "ril")
    past = as_tensor(past)
    history = encode(past)
    if variant is Variant.par:
        memory = model.encode(history)
        stream = history[:, -1:]
    else:
        stream = history
    frames, features = [], []
    for step in range(steps):
        if variant is Variant.par:
            z_next = model.decode(stream, memory)[:, -1:]
        else:
            z_next = model(stream)[:, -1:]
        if reencode:
            frame = decode(z_next)
            frames.append(frame)
            z_next = encode(frame)
        else:
            features.append(z_next)
        stream = torch.cat([stream, z_next], dim=1)
        logger.debug(f"{'rip' if reencode else 'ril'} step {step + 1}/{steps}")
    if reencode:
        return torch.cat(frames, dim=1)
    return decode(torch.cat(features, dim=1))


@torch.no_grad()
def infer_rip(past, encode, model, decode, steps):
    return _autoregress(past, encode, model, decode, steps, reencode=True)


@torch.no_grad()
def infer_ril(past, encode, model, decode, steps):
    return _autoregress(past, encode, model, decode, steps, reencode=False)


@torch.no_grad()
def nar_blockwise(past, encode, model, decode, total_steps):
    """Extend a NAR horizon by feeding its last `L` frames back as the next past.

    The final block is truncated when `total_steps` is not a multiple of
    the model's horizon.
    """
    if total_steps < 1:
        raise ShapeError(f"total_steps must be >= 1, got {total_steps}")
    check_mode(model_variant(model, Variant.nar), "block")
    past = as_tensor(past)
    length = past.shape[1]
    frames = past
    produced = []
    count = 0
    while count < total_steps:
        block = decode(model(encode(frames[:, -length:])))
        produced.append(block)
        count += block.shape[1]
        frames = torch.cat([frames, block], dim=1)
        logger.debug(f"block {len(produced)}: {count}/{total_steps} frames")
    return torch.cat(produced, dim=1)[:, :total_steps]


def predict(past, autoencoder, model, mode, steps):
    check_mode(model.variant, mode)
    if mode == "block":
        return nar_blockwise(past, autoencoder.encode, model, autoencoder.decode, steps)
    infer = infer_rip if mode == "rip" else infer_ril
    return infer(past, autoencoder.encode, model, autoencoder.decode, steps)


def train_stage2(variant, autoencoder, clips, config=None, train=None):
    """Stage two: fit a predictor on frozen autoencoder features.

    Pixel losses are taken on decoded predictions; the gradient flows
    through the decoder into the predictor only. Returns
    `(model, history)`.
    """
    config = config or VPTRConfig(variant=Variant(variant).value)
    if Variant(config.variant) is not Variant(variant):
        raise ConfigError(f"Model config is for {config.variant!r}, asked to train {Variant(variant).value!r}")
    train = train or TrainConfig()
    weights = LossWeights(lambda2=train.lambda2, alpha=train.alpha, temperature=train.temperature)
    clips = as_tensor(clips)
    past, future = config.past, config.future
    if clips.ndim != 5 or clips.shape[1] < past + future:
        raise ShapeError(f"Clips {tuple(clips.shape)} are shorter than past + future = {past + future}")
    clips = clips[:, : past + future]

    autoencoder.eval()
    autoencoder.requires_grad_(False)
    frozen = state_digest(autoencoder)
    model = build_model(config)
    model.train()
    optimizer = torch.optim.AdamW(model.parameters(), lr=train.lr, weight_decay=train.weight_decay)
    variant = Variant(variant)

    def step(batch):
        with torch.no_grad():
            z = autoencoder.encode(batch)
        z_future = None
        if variant is Variant.far:
            z_hat = model(z[:, :-1])
        elif variant is Variant.par:
            z_hat = model(z[:, :past], z[:, past - 1 : past + future - 1])
        else:
            z_hat = model(z[:, :past])
            z_future = z[:, past:]
        x_hat = autoencoder.decode(z_hat)
        objective = variant_loss(variant, batch, x_hat, past, z_future, z_hat, weights)
        logged = variant_loss(variant, batch, x_hat, past, z_future, z_hat, weights, reduction="mean")
        return objective, logged

    history = fit(
        step,
        model.parameters(),
        optimizer,
        clips,
        train.epochs,
        train.batch_size,
        seed=train.seed,
        augment=train.augment,
        clip_norm=train.clip_norm,
        stage=f"vptr-{variant.value}",
    )
    if state_digest(autoencoder) != frozen:
        raise CheckpointError("Autoencoder parameters changed during stage-two training")
    model.eval()
    return model, history


def save_model(directory, model, autoencoder_digest, **extra):
    return save_bundle(directory, model, "vptr", model.config, autoencoder_digest=autoencoder_digest, **extra)


def load_model(directory, autoencoder_digest=None):
    """Load a stage-two bundle, refusing it if it was trained against another autoencoder."""

    def build(manifest):
        return MODELS[Variant(manifest["config"]["variant"])](VPTRConfig(**manifest["config"]))

    model, manifest = load_bundle(directory, build, kind="vptr")
    if autoencoder_digest is not None and manifest["autoencoder_digest"] != autoencoder_digest:
        raise CheckpointError(
            f"{directory} was trained against autoencoder {manifest['autoencoder_digest']}, "
            f"not {autoencoder_digest}"
        )
    model.eval()
    return model, manifest
