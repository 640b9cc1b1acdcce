"""Per-modality transformer encoder with read-only prompts.

The encoder consumes ``[CLS, input tokens, prompts]`` (plus optional
prefix-tuning tokens in front) and returns the final embeddings of all
three sections. The attention mask keeps the CLS and input rows from
ever attending to prompt columns, so the class-token and input-token
embeddings are provably independent of the prompt values; prompts read
everything. Blocks are pre-norm: ``x + Attn(LN(x))`` then
``x + MLP(LN(x))`` with a GELU MLP at 4x width.

Prompts are a set, not a sequence: they carry no positional embedding.
CLS and input tokens use learned positional embeddings (CLS sits at
position 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, embedding, expand_batch, narrow, reshape, transpose
from .errors import ConfigurationError, DataError
from .nn import ParamStore, gelu, layer_norm, linear, masked_softmax_attention

PROMPT_SELF_ATTENTION_MODES = ("all", "diagonal")


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 2
    width: int = 32
    heads: int = 4
    vocab_size: int = 32
    max_len: int = 16
    prompt_len: int = 6
    prompt_self_attention: str = "all"

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ConfigurationError(f"width {self.width} not divisible by heads {self.heads}")
        if self.prompt_len < 0:
            raise ConfigurationError("prompt_len must be >= 0")
        if self.depth < 0 or self.max_len < 1 or self.vocab_size < 1:
            raise ConfigurationError("depth >= 0, max_len >= 1, vocab_size >= 1 required")
        if self.prompt_self_attention not in PROMPT_SELF_ATTENTION_MODES:
            raise ConfigurationError(f"prompt_self_attention must be one of {PROMPT_SELF_ATTENTION_MODES}")


@dataclass
class EncoderOutput:
    """Final embeddings of the class token, input tokens, and prompts."""

    cls: Tensor
    tokens: Tensor
    prompts_out: Tensor


class PromptBank:
    """Learnable read-only prompt rows for one encoder."""

    def __init__(self, phi: Tensor):
        self.phi = phi

    @property
    def length(self) -> int:
        return self.phi.shape[0]


def build_read_only_mask(seq_len: int, prompt_len: int, prompt_self_attention: str = "all") -> np.ndarray:
    """Boolean (1+seq_len+prompt_len)^2 mask, ordering [CLS, tokens, prompts].

    CLS and input-token rows may attend only to CLS+token columns; prompt
    rows may attend everywhere ("all") or to CLS+tokens+themselves
    ("diagonal"). True means "may attend".
    """
    return build_attention_mask(0, seq_len, prompt_len, read_only=True, prompt_self_attention=prompt_self_attention)


def build_attention_mask(
    prefix_len: int,
    seq_len: int,
    prompt_len: int,
    read_only: bool = True,
    prompt_self_attention: str = "all",
) -> np.ndarray:
    """Mask over [prefix, CLS, tokens, prompts]; prefix rows behave like input rows."""
    if seq_len < 1:
        raise ConfigurationError("seq_len must be >= 1")
    if prompt_len < 0 or prefix_len < 0:
        raise ConfigurationError("prompt_len and prefix_len must be >= 0")
    if prompt_self_attention not in PROMPT_SELF_ATTENTION_MODES:
        raise ConfigurationError(f"prompt_self_attention must be one of {PROMPT_SELF_ATTENTION_MODES}")
    core = prefix_len + 1 + seq_len
    total = core + prompt_len
    mask = np.ones((total, total), dtype=bool)
    if read_only and prompt_len > 0:
        mask[:core, core:] = False
        if prompt_self_attention == "diagonal":
            mask[core:, core:] = np.eye(prompt_len, dtype=bool)
    return mask


class TransformerEncoder:
    """Transformer encoder for one modality, with prompt and PEFT hooks."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator, read_only: bool = True):
        self.config = config
        self.read_only = read_only
        self.store = ParamStore()
        self.adapter_reduction: int | None = None
        self.prefix_len = 0
        self._mask_cache: dict[int, np.ndarray] = {}

        d = config.width
        w_std = 1.0 / np.sqrt(d)
        self.store.add("tok_embed", rng.normal(0.0, 0.02, (config.vocab_size, d)), "embedding")
        self.store.add("pos_embed", rng.normal(0.0, 0.02, (1 + config.max_len, d)), "embedding")
        self.store.add("cls_token", rng.normal(0.0, 0.02, (d,)), "embedding")
        self.prompts = PromptBank(self.store.add("prompts", rng.normal(0.0, 0.02, (config.prompt_len, d)), "prompt"))
        for i in range(config.depth):
            p = f"block{i}."
            self.store.add(p + "ln1.gain", np.ones(d), "norm_gain")
            self.store.add(p + "ln1.bias", np.zeros(d), "norm_bias")
            for proj in ("wq", "wk", "wv", "wo"):
                self.store.add(p + f"attn.{proj}", rng.normal(0.0, w_std, (d, d)), "weight")
            for proj in ("bq", "bk", "bv", "bo"):
                self.store.add(p + f"attn.{proj}", np.zeros(d), "bias")
            self.store.add(p + "ln2.gain", np.ones(d), "norm_gain")
            self.store.add(p + "ln2.bias", np.zeros(d), "norm_bias")
            self.store.add(p + "mlp.w1", rng.normal(0.0, w_std, (d, 4 * d)), "weight")
            self.store.add(p + "mlp.b1", np.zeros(4 * d), "bias")
            self.store.add(p + "mlp.w2", rng.normal(0.0, 1.0 / np.sqrt(4 * d), (4 * d, d)), "weight")
            self.store.add(p + "mlp.b2", np.zeros(d), "bias")

    def named_parameters(self):
        return list(self.store.items())

    def add_adapters(self, reduction: int, rng: np.random.Generator) -> None:
        """Insert bottleneck adapters before each layer norm (zero up-projection)."""
        d = self.config.width
        if reduction < 1 or d % reduction != 0:
            raise ConfigurationError(f"adapter reduction {reduction} must divide width {d}")
        if self.adapter_reduction is not None:
            raise ConfigurationError("adapters already injected")
        hidden = d // reduction
        for i in range(self.config.depth):
            for site in ("attn", "mlp"):
                p = f"block{i}.adapter_{site}."
                self.store.add(p + "down_w", rng.normal(0.0, 0.02, (d, hidden)), "adapter")
                self.store.add(p + "down_b", np.zeros(hidden), "adapter")
                self.store.add(p + "up_w", np.zeros((hidden, d)), "adapter")
                self.store.add(p + "up_b", np.zeros(d), "adapter")
        self.adapter_reduction = reduction
        self._mask_cache.clear()

    def add_prefix(self, prefix_len: int, rng: np.random.Generator) -> None:
        """Add prefix-tuning tokens (ordinary attention, unlike read-only prompts)."""
        if prefix_len < 1:
            raise ConfigurationError("prefix_len must be >= 1")
        if self.prefix_len:
            raise ConfigurationError("prefix already injected")
        self.store.add("prefix", rng.normal(0.0, 0.02, (prefix_len, self.config.width)), "prefix")
        self.prefix_len = prefix_len
        self._mask_cache.clear()

    def _mask(self, seq_len: int) -> np.ndarray:
        mask = self._mask_cache.get(seq_len)
        if mask is None:
            mask = build_attention_mask(
                self.prefix_len,
                seq_len,
                self.config.prompt_len,
                read_only=self.read_only,
                prompt_self_attention=self.config.prompt_self_attention,
            )
            self._mask_cache[seq_len] = mask
        return mask

    def _adapter(self, x: Tensor, block: int, site: str) -> Tensor:
        p = f"block{block}.adapter_{site}."
        h = gelu(linear(x, self.store[p + "down_w"], self.store[p + "down_b"]))
        return x + linear(h, self.store[p + "up_w"], self.store[p + "up_b"])

    def forward_batch(self, token_ids: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        """Encode a (batch, seq_len) int array; returns (cls, tokens, prompts_out)."""
        cfg = self.config
        ids = np.asarray(token_ids)
        if ids.ndim != 2 or ids.shape[1] < 1:
            raise DataError(f"token ids must be (batch, seq>=1), got shape {ids.shape}")
        if not np.issubdtype(ids.dtype, np.integer):
            raise DataError("token ids must be integers")
        if ids.shape[1] > cfg.max_len:
            raise DataError(f"sequence length {ids.shape[1]} exceeds max_len {cfg.max_len}")
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise DataError(f"token id out of range [0, {cfg.vocab_size}): {ids.min()}..{ids.max()}")

        b, s = ids.shape
        p0, p = self.prefix_len, cfg.prompt_len
        cls_vec = self.store["cls_token"] + narrow(self.store["pos_embed"], 0, 0, 1)
        parts = [expand_batch(cls_vec, b)]
        tokens = embedding(self.store["tok_embed"], ids) + narrow(self.store["pos_embed"], 0, 1, s)
        parts.append(tokens)
        if p > 0:
            parts.append(expand_batch(self.prompts.phi, b))
        if p0 > 0:
            parts.insert(0, expand_batch(self.store["prefix"], b))
        x = concat(parts, axis=1) if len(parts) > 1 else parts[0]

        mask = self._mask(s)
        t = x.shape[1]
        d = cfg.width
        dh = d // cfg.heads
        for i in range(cfg.depth):
            blk = f"block{i}."
            h = self._adapter(x, i, "attn") if self.adapter_reduction else x
            normed = layer_norm(h, self.store[blk + "ln1.gain"], self.store[blk + "ln1.bias"])
            q, k, v = (
                transpose(
                    reshape(linear(normed, self.store[blk + f"attn.w{nm}"], self.store[blk + f"attn.b{nm}"]), (b, t, cfg.heads, dh)),
                    (0, 2, 1, 3),
                )
                for nm in ("q", "k", "v")
            )
            att = masked_softmax_attention(q, k, v, mask)
            att = reshape(transpose(att, (0, 2, 1, 3)), (b, t, d))
            h = h + linear(att, self.store[blk + "attn.wo"], self.store[blk + "attn.bo"])
            h2 = self._adapter(h, i, "mlp") if self.adapter_reduction else h
            normed = layer_norm(h2, self.store[blk + "ln2.gain"], self.store[blk + "ln2.bias"])
            m = linear(gelu(linear(normed, self.store[blk + "mlp.w1"], self.store[blk + "mlp.b1"])), self.store[blk + "mlp.w2"], self.store[blk + "mlp.b2"])
            x = h2 + m

        cls = reshape(narrow(x, 1, p0, 1), (b, d))
        toks = narrow(x, 1, p0 + 1, s)
        prompts_out = narrow(x, 1, p0 + 1 + s, p) if p > 0 else Tensor(np.zeros((b, 0, d)))
        return cls, toks, prompts_out

    def encode(self, token_ids) -> EncoderOutput:
        """Encode a single token sequence."""
        ids = np.asarray(token_ids)
        if ids.ndim != 1 or ids.size == 0:
            raise DataError("encode expects a non-empty 1-d token sequence")
        cls, tokens, prompts_out = self.forward_batch(ids[None, :])
        d = self.config.width
        return EncoderOutput(
            cls=reshape(cls, (d,)),
            tokens=reshape(tokens, (ids.size, d)),
            prompts_out=reshape(prompts_out, (self.config.prompt_len, d)),
        )
