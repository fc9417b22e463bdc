"""Analytic per-sample training FLOPs for language and vision transformers.

Counts follow the usual 2-FLOPs-per-MAC convention, with softmax charged at
3 FLOPs per score. Training cost is forward plus a backward pass charged at
twice the forward, i.e. train = 3 x forward. All arithmetic is exact integer
math so golden values never drift.

A joint dual-encoder (CLIP-style) pays for both towers per sample; a pipeline
that trains only the image tower against precomputed caption embeddings pays
for the vision tower alone. compare_joint_vs_frozen quantifies the gap: the
text tower scales ~O(n_ctx^2) with caption length while the frozen-text cost
is independent of it.

Note on n_ctx: tokenizers pad/truncate per batch, so the honest per-sample
figure uses the average per-batch max caption length; callers approximate it
(commonly with a global max) and this model takes n_ctx as given.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError

GIGA = 10**9


@dataclass(frozen=True)
class LangCostConfig:
    n_ctx: int
    n_vocab: int
    d_model: int
    n_heads: int
    d_key: int
    d_ff: int
    n_layers: int

    def __post_init__(self):
        _check_fields(self, min_layers=0)


@dataclass(frozen=True)
class VisionCostConfig:
    n_patch: int
    d_patch: int
    n_channels: int
    d_model: int
    n_heads: int
    d_key: int
    d_ff: int
    n_layers: int

    def __post_init__(self):
        _check_fields(self, min_layers=0)


def _check_fields(cfg, min_layers: int) -> None:
    for name, value in vars(cfg).items():
        if not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer, got {value!r}")
        floor = min_layers if name == "n_layers" else 1
        if value < floor:
            raise ConfigError(f"{name} must be >= {floor}, got {value}")


@dataclass(frozen=True)
class CostReport:
    embedding_flops: int
    per_layer_attention_flops: int
    per_layer_ff_flops: int
    forward_total: int
    train_total: int

    def __post_init__(self):
        assert self.train_total == 3 * self.forward_total

    @property
    def train_gflops(self) -> float:
        return self.train_total / GIGA


def _attention_flops(n_tokens: int, d_model: int, n_heads: int, d_key: int) -> int:
    width = d_key * n_heads
    f_qkv = 2 * n_tokens * (3 * d_model) * width
    f_qk = 2 * n_tokens**2 * width
    f_soft = 3 * n_heads * n_tokens**2
    f_red = 2 * n_tokens**2 * width
    f_proj = 2 * n_tokens * width * d_model
    return f_qkv + f_qk + f_soft + f_red + f_proj


def _report(f_emb: int, f_attn: int, f_ff: int, n_layers: int) -> CostReport:
    forward = f_emb + n_layers * (f_attn + f_ff)
    return CostReport(f_emb, f_attn, f_ff, forward, 3 * forward)


def language_flops(cfg: LangCostConfig) -> CostReport:
    f_emb = 2 * cfg.n_ctx * cfg.n_vocab * cfg.d_model
    f_attn = _attention_flops(cfg.n_ctx, cfg.d_model, cfg.n_heads, cfg.d_key)
    f_ff = 4 * cfg.n_ctx * cfg.d_model * cfg.d_ff
    return _report(f_emb, f_attn, f_ff, cfg.n_layers)


def vision_flops(cfg: VisionCostConfig) -> CostReport:
    f_emb = 2 * cfg.n_patch * cfg.d_patch**2 * cfg.n_channels * cfg.d_model
    f_attn = _attention_flops(cfg.n_patch, cfg.d_model, cfg.n_heads, cfg.d_key)
    f_ff = 4 * cfg.n_patch * cfg.d_model * cfg.d_ff
    return _report(f_emb, f_attn, f_ff, cfg.n_layers)


@dataclass(frozen=True)
class JointVsFrozenComparison:
    vision: CostReport
    text: CostReport | None
    joint_train_total: int
    frozen_train_total: int
    reduction: float  # 1 - frozen/joint


def compare_joint_vs_frozen(
    vision: VisionCostConfig, text: LangCostConfig | None
) -> JointVsFrozenComparison:
    """Per-sample training cost of a joint dual encoder vs an image-only
    pipeline with frozen precomputed text embeddings. text=None means a
    zero-cost text tower (degenerate case: no reduction)."""
    v = vision_flops(vision)
    t = language_flops(text) if text is not None else None
    joint = v.train_total + (t.train_total if t else 0)
    frozen = v.train_total
    return JointVsFrozenComparison(v, t, joint, frozen, 1.0 - frozen / joint)


# Standard 224px/16px-patch model shapes used for the reference comparison
# table. Token count is the bare patch grid (224/16)^2 = 196: the class token
# is excluded from the cost approximation. Text towers are the CLIP-family
# shapes conventionally paired with each vision size (vocab 49408, 12 layers).

def _vision_preset(d_model, n_heads, d_ff, n_layers):
    return VisionCostConfig(
        n_patch=(224 // 16) ** 2,
        d_patch=16,
        n_channels=3,
        d_model=d_model,
        n_heads=n_heads,
        d_key=64,
        d_ff=d_ff,
        n_layers=n_layers,
    )


VISION_PRESETS = {
    "vit_s16": _vision_preset(384, 6, 1536, 12),
    "vit_b16": _vision_preset(768, 12, 3072, 12),
    "vit_l16": _vision_preset(1024, 16, 4096, 24),
}

_TEXT_SHAPES = {
    "vit_s16": (384, 6, 1536),
    "vit_b16": (512, 8, 2048),
    "vit_l16": (768, 12, 3072),
}


def clip_text_tower(vision_name: str, n_ctx: int) -> LangCostConfig:
    d_model, n_heads, d_ff = _TEXT_SHAPES[vision_name]
    return LangCostConfig(
        n_ctx=n_ctx,
        n_vocab=49408,
        d_model=d_model,
        n_heads=n_heads,
        d_key=64,
        d_ff=d_ff,
        n_layers=12,
    )


def reference_comparison(n_ctx_values=(77, 128)) -> list[dict]:
    """One row per (model, n_ctx): joint and frozen-text train GFLOPs plus
    the per-row reduction. Rows are ordered model-major."""
    rows = []
    for name in VISION_PRESETS:
        for n_ctx in n_ctx_values:
            cmp = compare_joint_vs_frozen(VISION_PRESETS[name], clip_text_tower(name, n_ctx))
            rows.append(
                {
                    "model": name,
                    "n_ctx": n_ctx,
                    "joint_gflops": cmp.joint_train_total / GIGA,
                    "frozen_gflops": cmp.frozen_train_total / GIGA,
                    "reduction": cmp.reduction,
                }
            )
    return rows


def mean_reduction(n_ctx: int) -> float:
    """Reduction averaged over the three standard model sizes at one n_ctx."""
    rows = [r for r in reference_comparison((n_ctx,))]
    return sum(r["reduction"] for r in rows) / len(rows)
