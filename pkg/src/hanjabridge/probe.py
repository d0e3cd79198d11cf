"""Zero-shot multiple-choice Hanja probe with position-debiased scoring.

Each item yields k prompts, cyclically rotating the option list so the gold
option appears once at every display position (a cyclic Latin square over
positions). An option's final score is its log-likelihood as a continuation,
averaged over the k prompts; the averaged score of every option is invariant
under cyclic rotation of the item's option list because the generated prompt
set is identical. Ties score as incorrect.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from .augment import AugmentConfig, augment, build_attention_mask, causal_mask, plain_augmented
from .errors import ConfigError
from .lexicon import Lexicon
from .tokenizer import Vocab, encode

DEFAULT_TEMPLATE = "{context} {surface} {options}"
MODE_WITH_HB = "with-hb-inference"
MODE_WITHOUT_HB = "without-hb-inference"
MODES = (MODE_WITH_HB, MODE_WITHOUT_HB)
TEMPLATE_SLOTS = ("context", "surface", "options")


@dataclass(frozen=True)
class ProbeItem:
    context: str
    surface: str
    options: tuple[str, ...]
    gold: int

    def __post_init__(self):
        if len(self.options) < 2:
            raise ConfigError("a probe item needs at least 2 options")
        if len(set(self.options)) != len(self.options):
            raise ConfigError(f"options must be pairwise distinct: {self.options}")
        if not (0 <= self.gold < len(self.options)):
            raise ConfigError(f"gold index {self.gold} out of range")

    @property
    def k(self) -> int:
        return len(self.options)


def load_probe_items(path) -> list[ProbeItem]:
    items = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                items.append(
                    ProbeItem(
                        context=row["context"],
                        surface=row["surface"],
                        options=tuple(row["options"]),
                        gold=int(row["gold"]),
                    )
                )
            except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
                raise ConfigError(f"{path}:{lineno}: bad probe item: {exc}") from None
    return items


def save_probe_items(items, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(
                json.dumps(
                    {
                        "context": item.context,
                        "surface": item.surface,
                        "options": list(item.options),
                        "gold": item.gold,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def _check_template(template: str) -> None:
    fields = {name for _, name, _, _ in string.Formatter().parse(template) if name}
    missing = set(TEMPLATE_SLOTS) - fields
    if missing:
        raise ConfigError(f"template missing slot(s): {sorted(missing)}")
    unknown = fields - set(TEMPLATE_SLOTS)
    if unknown:
        raise ConfigError(f"template has unknown slot(s): {sorted(unknown)}")


def render_prompts(item: ProbeItem, template: str = DEFAULT_TEMPLATE) -> list[str]:
    """k prompts; prompt r displays the options rotated so the gold option
    sits at position r. Across the k prompts every option occupies every
    position exactly once."""
    _check_template(template)
    k = item.k
    prompts = []
    for r in range(k):
        displayed = [item.options[(item.gold + p - r) % k] for p in range(k)]
        prompts.append(
            template.format(context=item.context, surface=item.surface, options=" ".join(displayed))
        )
    return prompts


def score_option(
    model,
    prefix: str,
    option: str,
    vocab: Vocab,
    *,
    lexicon: Lexicon | None = None,
    augment_config: AugmentConfig | None = None,
    candidate_context: str = "prefix",
    length_normalize: bool = False,
) -> tuple[float, int]:
    """Log-likelihood of `option` as the continuation of `prefix`, plus the
    number of tokens processed. With a lexicon and augment config the prefix
    text is HanjaBridge-expanded and scored under the restricted mask;
    otherwise scoring is plain causal."""
    opt_ids = encode(vocab, option).ids
    if not option.strip() or not opt_ids:
        raise ConfigError("empty option cannot be scored")
    full = prefix.rstrip() + " " + option
    enc = encode(vocab, full)
    hb = lexicon is not None and augment_config is not None and augment_config.k > 0
    if hb:
        aug = augment(enc, lexicon, vocab, augment_config)
        mask = build_attention_mask(aug, candidate_context=candidate_context)
    else:
        aug = plain_augmented(enc)
        mask = causal_mask(len(enc.ids))
    chain = aug.original_positions
    n_opt = len(opt_ids)
    if len(chain) - n_opt < 1:
        raise ConfigError("prompt prefix produced no tokens before the option")
    with torch.no_grad():
        logits, _ = model.forward(aug.ids, mask)
        log_probs = F.log_softmax(logits, dim=-1)
    total = 0.0
    for j in range(n_opt):
        pos = len(chain) - n_opt + j
        predictor = chain[pos - 1]
        target = aug.ids[chain[pos]]
        total += float(log_probs[predictor, target])
    if length_normalize:
        total /= n_opt
    return total, len(aug.ids)


@dataclass
class ProbeReport:
    mode: str
    n_items: int
    correct: int
    accuracy: float
    total_tokens: int
    avg_tokens_per_sample: float
    per_k: dict[int, tuple[int, int]] = field(default_factory=dict)  # k -> (correct, total)


def probe_run(
    model,
    items,
    mode: str,
    vocab: Vocab,
    template: str = DEFAULT_TEMPLATE,
    lexicon: Lexicon | None = None,
    augment_config: AugmentConfig | None = None,
    candidate_context: str = "prefix",
    length_normalize: bool = False,
) -> ProbeReport:
    """Score every item with the k rotated prompts. An option's final score
    is the mean log-likelihood over prompts; the argmax must be strict to
    count as correct."""
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    if mode == MODE_WITH_HB and (lexicon is None or augment_config is None):
        raise ConfigError("with-hb-inference mode needs a lexicon and an augment config")
    hb_kwargs = {}
    if mode == MODE_WITH_HB:
        hb_kwargs = {"lexicon": lexicon, "augment_config": augment_config,
                     "candidate_context": candidate_context}
    correct = 0
    total_tokens = 0
    per_k: dict[int, list[int]] = {}
    for item in items:
        prompts = render_prompts(item, template)
        sums = [0.0] * item.k
        for prompt in prompts:
            for oi, option in enumerate(item.options):
                ll, n_tok = score_option(
                    model, prompt, option, vocab,
                    length_normalize=length_normalize, **hb_kwargs,
                )
                sums[oi] += ll
                total_tokens += n_tok
        scores = [s / item.k for s in sums]
        best = max(scores)
        winners = [i for i, s in enumerate(scores) if s == best]
        hit = len(winners) == 1 and winners[0] == item.gold
        correct += int(hit)
        bucket = per_k.setdefault(item.k, [0, 0])
        bucket[0] += int(hit)
        bucket[1] += 1
    n = len(items)
    return ProbeReport(
        mode=mode,
        n_items=n,
        correct=correct,
        accuracy=(correct / n) if n else 0.0,
        total_tokens=total_tokens,
        avg_tokens_per_sample=(total_tokens / n) if n else 0.0,
        per_k={k: (v[0], v[1]) for k, v in sorted(per_k.items())},
    )


def write_probe_tsv(reports, path) -> None:
    """Rows acc / total token / avg token per sample, one column per mode."""
    reports = list(reports)
    lines = ["metric\t" + "\t".join(r.mode for r in reports)]
    lines.append("acc\t" + "\t".join(f"{r.accuracy:.6f}" for r in reports))
    lines.append("total token\t" + "\t".join(str(r.total_tokens) for r in reports))
    lines.append("avg token per sample\t" + "\t".join(f"{r.avg_tokens_per_sample:.2f}" for r in reports))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
