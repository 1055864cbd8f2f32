"""Shared-weight ViT masked autoencoder with one branch per masking strategy.

A single :class:`MmsParams` record is used by every branch. The encoder
sees only visible patches plus a CLS token; the decoder puts a learned mask
token at every masked position, adds its own positional embeddings and
predicts all ``N`` patches. Losses are computed on masked patches only
against per-patch normalised targets.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, EmptyMaskError, EmptySelectionError, GeometryError
from .masking import STRATEGIES, MaskSet
from .patches import ImageBuf, normalize_targets
from .rng import derive_seed, truncated_gaussian_block

LN_EPS = 1e-6
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelDims:
    d_model: int
    depth: int
    heads: int
    d_dec: int = 256
    dec_depth: int = 2
    dec_heads: int = 8
    mlp_ratio: int = 4
    patch_dim: int = 48
    num_patches: int = 256

    def validate(self):
        if self.d_model % self.heads or self.d_dec % self.dec_heads:
            raise ConfigError("model widths must be divisible by their head counts")
        if min(self.d_model, self.depth, self.heads, self.d_dec, self.dec_depth,
               self.dec_heads, self.mlp_ratio, self.patch_dim, self.num_patches) < 1:
            raise ConfigError("all model dimensions must be positive")
        return self

    def as_vector(self):
        return np.array([self.patch_dim, self.num_patches, self.d_model, self.depth, self.heads,
                         self.d_dec, self.dec_depth, self.dec_heads, self.mlp_ratio], dtype=np.float64)

    @classmethod
    def from_vector(cls, v):
        p, n, d, depth, h, dd, ddep, dh, r = (int(x) for x in v)
        return cls(d, depth, h, dd, ddep, dh, r, p, n)


PRESETS = {
    "tiny-desk": ModelDims(d_model=64, depth=4, heads=4),
    "vit-tiny": ModelDims(d_model=192, depth=12, heads=3),
}


def preset_dims(preset):
    try:
        return PRESETS[preset]
    except KeyError:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}") from None


def _block_shapes(prefix, d, mlp_ratio):
    hidden = d * mlp_ratio
    shapes = [(f"{prefix}.ln1.g", (d,)), (f"{prefix}.ln1.b", (d,))]
    for proj in ("q", "k", "v", "o"):
        shapes += [(f"{prefix}.attn.{proj}.w", (d, d)), (f"{prefix}.attn.{proj}.b", (d,))]
    shapes += [(f"{prefix}.ln2.g", (d,)), (f"{prefix}.ln2.b", (d,)),
               (f"{prefix}.mlp.fc1.w", (d, hidden)), (f"{prefix}.mlp.fc1.b", (hidden,)),
               (f"{prefix}.mlp.fc2.w", (hidden, d)), (f"{prefix}.mlp.fc2.b", (d,))]
    return shapes


def param_shapes(dims):
    """Ordered ``(name, shape)`` list for every parameter tensor."""
    n1 = dims.num_patches + 1
    shapes = [("patch_embed.w", (dims.patch_dim, dims.d_model)), ("patch_embed.b", (dims.d_model,)),
              ("cls_token", (dims.d_model,)), ("pos_embed", (n1, dims.d_model))]
    for i in range(dims.depth):
        shapes += _block_shapes(f"enc.{i}", dims.d_model, dims.mlp_ratio)
    shapes += [("enc_norm.g", (dims.d_model,)), ("enc_norm.b", (dims.d_model,)),
               ("decoder_embed.w", (dims.d_model, dims.d_dec)), ("decoder_embed.b", (dims.d_dec,)),
               ("mask_token", (dims.d_dec,)), ("dec_pos_embed", (n1, dims.d_dec))]
    for i in range(dims.dec_depth):
        shapes += _block_shapes(f"dec.{i}", dims.d_dec, dims.mlp_ratio)
    shapes += [("dec_norm.g", (dims.d_dec,)), ("dec_norm.b", (dims.d_dec,)),
               ("pred_head.w", (dims.d_dec, dims.patch_dim)), ("pred_head.b", (dims.patch_dim,))]
    return shapes


def param_count(dims):
    """Closed-form parameter count."""
    def block(d):
        return 4 * (d * d + d) + 4 * d + 2 * dims.mlp_ratio * d * d + dims.mlp_ratio * d + d

    n1 = dims.num_patches + 1
    enc = dims.patch_dim * dims.d_model + dims.d_model + dims.d_model + n1 * dims.d_model
    enc += dims.depth * block(dims.d_model) + 2 * dims.d_model
    dec = dims.d_model * dims.d_dec + dims.d_dec + dims.d_dec + n1 * dims.d_dec
    dec += dims.dec_depth * block(dims.d_dec) + 2 * dims.d_dec
    dec += dims.d_dec * dims.patch_dim + dims.patch_dim
    return enc + dec


def decays(name):
    """Whether AdamW weight decay applies: matrix weights only."""
    return name.endswith(".w")


class MmsParams:
    """The one parameter record shared by all masking branches."""

    def __init__(self, dims, tensors):
        self.dims = dims
        self.tensors = dict(tensors)
        expected = param_shapes(dims)
        if [n for n, _ in expected] != list(self.tensors):
            raise ConfigError("parameter names do not match the model dimensions")
        for name, shape in expected:
            if self.tensors[name].shape != shape:
                raise ConfigError(f"{name}: shape {self.tensors[name].shape}, expected {shape}")

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self):
        return list(self.tensors)

    def num_parameters(self):
        return sum(t.size for t in self.tensors.values())

    def replace(self, arrays):
        """New record with the given ``name -> ndarray`` values."""
        return MmsParams(self.dims, {n: Tensor(arrays[n], requires_grad=True) for n in self.tensors})

    def arrays(self):
        return {n: t.data for n, t in self.tensors.items()}

    def encoder_names(self):
        return [n for n in self.tensors if n.startswith(("patch_embed", "cls_token", "pos_embed",
                                                         "enc.", "enc_norm"))]


def init_params(preset="tiny-desk", seed=0):
    """Truncated-normal (std 0.02, +-2 std) weights, zero biases, unit gains."""
    dims = preset if isinstance(preset, ModelDims) else preset_dims(preset)
    dims.validate()
    tensors = {}
    for name, shape in param_shapes(dims):
        n = int(np.prod(shape))
        if name.endswith((".ln1.g", ".ln2.g", "norm.g")):
            data = np.ones(shape)
        elif name.endswith(".b"):
            data = np.zeros(shape)
        else:
            data = truncated_gaussian_block(derive_seed(seed, "init", name), n, INIT_STD).reshape(shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return MmsParams(dims, tensors)


def _split_heads(x, heads):
    t, d = x.shape
    return ad.transpose(ad.reshape(x, (t, heads, d // heads)), (1, 0, 2))


def _merge_heads(x):
    h, t, dh = x.shape
    return ad.reshape(ad.transpose(x, (1, 0, 2)), (t, h * dh))


def transformer_block(params, prefix, x, heads):
    """Pre-norm block; returns ``(output, attention [heads, T, T])``."""
    p = params.tensors
    h = ad.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"], LN_EPS)
    q = ad.linear(h, p[f"{prefix}.attn.q.w"], p[f"{prefix}.attn.q.b"])
    q = _split_heads(ad.scale(q, 1.0 / math.sqrt(q.shape[-1] // heads)), heads)
    k = _split_heads(ad.linear(h, p[f"{prefix}.attn.k.w"], p[f"{prefix}.attn.k.b"]), heads)
    v = _split_heads(ad.linear(h, p[f"{prefix}.attn.v.w"], p[f"{prefix}.attn.v.b"]), heads)
    attn = ad.softmax_rows(ad.matmul(q, ad.transpose(k, (0, 2, 1))))
    mixed = _merge_heads(ad.matmul(attn, v))
    x = ad.add(x, ad.linear(mixed, p[f"{prefix}.attn.o.w"], p[f"{prefix}.attn.o.b"]))
    h = ad.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"], LN_EPS)
    h = ad.gelu(ad.linear(h, p[f"{prefix}.mlp.fc1.w"], p[f"{prefix}.mlp.fc1.b"]))
    x = ad.add(x, ad.linear(h, p[f"{prefix}.mlp.fc2.w"], p[f"{prefix}.mlp.fc2.b"]))
    return x, attn.data


def _check_mask(grid, mask):
    if (mask.grid_h, mask.grid_w) != (grid.grid_h, grid.grid_w):
        raise GeometryError(f"mask is {mask.grid_h}x{mask.grid_w}, grid is {grid.grid_h}x{grid.grid_w}")


def encode_tokens(params, patch_rows, positions, all_layers=False):
    """Encode patch vectors sitting at the given grid positions.

    ``patch_rows`` is ``[V, patch_dim]`` (may be ``None`` when nothing is
    visible). Returns ``([V+1, d_model] features, attention list)`` where the
    CLS token is row 0.
    """
    p, dims = params.tensors, params.dims
    cls = ad.reshape(ad.add(p["cls_token"], ad.reshape(ad.slice_rows(p["pos_embed"], 0, 1),
                                                       (dims.d_model,))), (1, dims.d_model))
    if patch_rows is None or len(positions) == 0:
        x = cls
    else:
        emb = ad.linear(ad.as_tensor(patch_rows), p["patch_embed.w"], p["patch_embed.b"])
        pos = ad.gather_rows(p["pos_embed"], np.asarray(positions) + 1)
        x = ad.concat_rows([cls, ad.add(emb, pos)])
    attns = []
    for i in range(dims.depth):
        x, a = transformer_block(params, f"enc.{i}", x, dims.heads)
        if all_layers or i == dims.depth - 1:
            attns.append(a)
    x = ad.layer_norm(x, p["enc_norm.g"], p["enc_norm.b"], LN_EPS)
    return x, attns


def encode_visible(params, grid, mask, all_layers=False):
    """Encoder pass over the visible patches only (CLS prepended)."""
    _check_mask(grid, mask)
    if grid.num_patches != params.dims.num_patches or grid.patch_dim != params.dims.patch_dim:
        raise GeometryError("grid does not match the model's patch geometry")
    visible = mask.visible()
    rows = ad.gather_rows(grid.patches, visible) if visible else None
    return encode_tokens(params, rows, visible, all_layers)


def decode_with_mask_tokens(params, features, mask):
    """Decoder pass; returns ``[N, patch_dim]`` predictions for every slot."""
    p, dims = params.tensors, params.dims
    n = mask.num_patches
    visible = mask.visible()
    if features.shape[0] != len(visible) + 1 or n != dims.num_patches:
        raise GeometryError(f"{features.shape[0]} encoder tokens for {len(visible)} visible patches")
    y = ad.linear(features, p["decoder_embed.w"], p["decoder_embed.b"])
    cls = ad.slice_rows(y, 0, 1)
    if visible:
        full = ad.interleave_rows(ad.slice_rows(y, 1, len(visible) + 1), p["mask_token"], visible, n)
    else:
        full = ad.linear(Tensor(np.ones((n, 1))), ad.reshape(p["mask_token"], (1, dims.d_dec)))
    x = ad.add(ad.concat_rows([cls, full]), p["dec_pos_embed"])
    for i in range(dims.dec_depth):
        x, _ = transformer_block(params, f"dec.{i}", x, dims.dec_heads)
    x = ad.layer_norm(x, p["dec_norm.g"], p["dec_norm.b"], LN_EPS)
    pred = ad.linear(x, p["pred_head.w"], p["pred_head.b"])
    return ad.slice_rows(pred, 1, n + 1)


def branch_loss(recon, targets, mask):
    """``(1/|M|) * sum_{i in M} ||recon_i - target_i||^2``.

    The squared norm is summed over the patch vector and not divided by its
    length. ``targets`` may be a normalised PatchGrid, a Tensor or an array.
    """
    if len(mask) == 0:
        raise EmptyMaskError("loss needs at least one masked patch")
    if hasattr(targets, "patches"):
        targets = targets.patches
    tgt = ad.as_tensor(targets).data
    idx = list(mask.masked)
    diff = ad.sub(ad.gather_rows(recon, idx), Tensor(tgt[idx]))
    return ad.scale(ad.sum_all(ad.mul(diff, diff)), 1.0 / len(idx))


@dataclass
class BranchOutput:
    recon_patches: Tensor
    encoder_attn: list
    visible_idx: tuple
    loss: Tensor = None


@dataclass
class ForwardResult:
    losses: dict
    total: Tensor
    outputs: dict = field(default_factory=dict)


def forward_branches(params, grid, masks, targets=None):
    """Run each ``strategy -> mask`` branch through the shared weights.

    The total is the unweighted sum of branch losses, summed in the fixed
    order random, block, span.
    """
    if targets is None:
        targets = normalize_targets(grid)
    losses, outputs = {}, {}
    total = None
    for strategy in sorted(masks, key=lambda s: STRATEGIES.index(s) if s in STRATEGIES else 99):
        mask = masks[strategy]
        feats, attn = encode_visible(params, grid, mask)
        recon = decode_with_mask_tokens(params, feats, mask)
        loss = branch_loss(recon, targets, mask)
        losses[strategy] = loss
        outputs[strategy] = BranchOutput(recon, attn, mask.visible(), loss)
        total = loss if total is None else ad.add(total, loss)
    return ForwardResult(losses, total, outputs)


def mms_forward(params, grid, masks):
    """Three-branch forward for a ``(random, block, span)`` mask triple.

    Returns ``(L_r, L_b, L_s, L_MMS, outputs)``.
    """
    if len(masks) != 3:
        raise ValueError("mms_forward expects a (random, block, span) mask triple")
    keys = ("random", "block", "span")
    res = forward_branches(params, grid, dict(zip(keys, masks)))
    return (res.losses["random"], res.losses["block"], res.losses["span"], res.total,
            [res.outputs[k] for k in keys])


# attention maps ---------------------------------------------------------

@dataclass
class AttentionMap:
    values: np.ndarray   # [grid_h, grid_w], raw head-averaged attention
    kept: np.ndarray     # [grid_h, grid_w] bool, patches surviving the threshold
    heatmap: ImageBuf    # thresholded, max-normalised, image resolution
    overlay: ImageBuf = None


def encoder_attention(params, grid):
    """Final-layer encoder attention on the full image, averaged over heads."""
    full = MaskSet(grid.grid_h, grid.grid_w, (), "random", 0.0)
    _, attns = encode_visible(params, grid, full)
    return attns[-1].mean(axis=0)


def threshold_mass(values, tau):
    """Smallest set of entries holding at least ``tau`` of the total mass."""
    flat = values.reshape(-1)
    if tau >= 1.0:
        return np.ones(flat.shape, dtype=bool).reshape(values.shape)
    order = np.argsort(-flat, kind="stable")
    cum = np.cumsum(flat[order])
    k = int(np.searchsorted(cum, tau * cum[-1])) + 1
    keep = np.zeros(flat.shape, dtype=bool)
    keep[order[:k]] = True
    return keep.reshape(values.shape)


def _render(values, kept, patch_size, image=None):
    shown = np.where(kept, values, 0.0)
    peak = shown.max()
    norm = shown / peak if peak > 0 else shown
    block = np.ones((patch_size, patch_size))
    heat = ImageBuf(np.kron(norm, block)[:, :, None])
    overlay = None
    if image is not None:
        raw_peak = values.max()
        alpha = np.kron(values / raw_peak if raw_peak > 0 else values, block)[:, :, None]
        overlay = ImageBuf(image.data * alpha)
    return heat, overlay


def _attention_row(params, grid, row, tau, image, attn):
    if attn is None:
        attn = encoder_attention(params, grid)
    values = attn[row, 1:].reshape(grid.grid_h, grid.grid_w)
    kept = threshold_mass(values, tau)
    heat, overlay = _render(values, kept, grid.patch_size, image)
    return AttentionMap(values, kept, heat, overlay)


def attention_cls(params, grid, tau=0.6, image=None, attn=None):
    """CLS-to-patch attention (CLS self-attention excluded), thresholded at mass ``tau``."""
    return _attention_row(params, grid, 0, tau, image, attn)


def attention_patch(params, grid, patch_index, tau=0.6, image=None, attn=None):
    """Attention of one patch token over all patch tokens."""
    if not 0 <= patch_index < grid.num_patches:
        raise IndexError(f"patch index {patch_index} out of range [0, {grid.num_patches})")
    return _attention_row(params, grid, patch_index + 1, tau, image, attn)


def patch_overlap(char_mask, grid_h, grid_w, patch_size):
    """Fraction of each patch's pixels covered by a binary pixel mask."""
    m = np.asarray(char_mask.data if isinstance(char_mask, ImageBuf) else char_mask, dtype=np.float64)
    if m.ndim == 3:
        m = m[:, :, 0]
    if m.shape != (grid_h * patch_size, grid_w * patch_size):
        raise GeometryError(f"character mask {m.shape} does not match the image")
    m = (m > 0.5).astype(np.float64)
    return m.reshape(grid_h, patch_size, grid_w, patch_size).mean(axis=(1, 3))


def select_char_patches(char_mask, grid_h, grid_w, patch_size, min_overlap=0.7):
    frac = patch_overlap(char_mask, grid_h, grid_w, patch_size)
    return [int(i) for i in np.flatnonzero(frac.reshape(-1) > min_overlap)]


def attention_char(params, grid, char_mask, tau=0.6, min_overlap=0.7, attn=None):
    """Mean of the patch attention maps of patches >70% covered by ``char_mask``."""
    chosen = select_char_patches(char_mask, grid.grid_h, grid.grid_w, grid.patch_size, min_overlap)
    if not chosen:
        raise EmptySelectionError(f"no patch overlaps the character mask by more than {min_overlap:.0%}")
    if attn is None:
        attn = encoder_attention(params, grid)
    maps = [attention_patch(params, grid, i, tau, attn=attn) for i in chosen]
    values = np.mean([m.values for m in maps], axis=0)
    kept = np.any([m.kept for m in maps], axis=0)
    heat = ImageBuf(np.mean([m.heatmap.data for m in maps], axis=0))
    return AttentionMap(values, kept, heat)
