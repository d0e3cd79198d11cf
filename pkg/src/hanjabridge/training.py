"""End-to-end run orchestration.

A run builds the synthetic corpus (optionally a mixture of sense counts over
disjoint alphabet slices), pretrains a teacher on the mixed raw domain-A +
domain-B text with a character-level vocabulary, grows the teacher's
parameters onto the expanded student vocabulary (word and Hanja tokens
appended; existing rows preserved), and continually pretrains the student
variant selected by (k, lambda). With lambda = 0 the distillation machinery
is skipped entirely, so a `--lambda 0` run and a `--no-distill` run execute
identical code and produce byte-equal metrics logs.
"""

from __future__ import annotations

import dataclasses
import json
import random
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import corpus as corpus_mod
from .augment import AugmentConfig, AugmentedSequence, augment, build_attention_mask, causal_mask, plain_augmented
from .corpus import GeneratedData, PlainConfig, SynthConfig
from .distill import AlignmentMap, DistillConfig, InstanceQueue, align, enqueue_batch, kd_loss, teacher_forward
from .errors import ConfigError
from .lexicon import Lexicon, save_lexicon
from .model import (
    LossConfig,
    ModelConfig,
    TinyLM,
    apply_freeze,
    grow_vocab,
    init_model,
    make_optimizer,
    save_checkpoint,
    train_step,
)
from .probe import save_probe_items
from .tokenizer import Vocab, build_vocab, encode, expand_vocab, save_vocab


@dataclass(frozen=True)
class ArchConfig:
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 64
    d_ff: int = 256
    max_positions: int = 192
    tie_embeddings: bool = True


@dataclass(frozen=True)
class TrainSettings:
    steps: int = 2000
    batch_size: int = 16
    checkpoint_interval: int = 400
    seed: int = 0
    lr: float = 3e-4
    teacher_steps: int = 1500
    teacher_lr: float = 1e-3
    lambda_kd: float = 0.1
    distill: bool = True
    freeze: tuple[str, ...] = ()
    reduction: str = "mean"
    candidate_context: str = "prefix"
    # student CPT text: "plain" is the Hangul-only form (target-language-only
    # continual pretraining); "inline" keeps the gold spelling written after
    # each homophone (mixed-script text)
    student_corpus: str = "plain"
    # fraction of the mixed-script domain-A text in the teacher's pretraining
    # mix; lowering it models a base model that has seen the target language
    # only sparsely
    teacher_mix_a: float = 1.0

    def __post_init__(self):
        if self.student_corpus not in ("inline", "plain"):
            raise ConfigError("student_corpus must be 'inline' or 'plain'")
        if not (0.0 <= self.teacher_mix_a <= 1.0):
            raise ConfigError("teacher_mix_a must be in [0, 1]")


@dataclass(frozen=True)
class RunConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    plain: PlainConfig = field(default_factory=PlainConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    # when non-empty, one sub-corpus per sense count, over disjoint alphabet
    # slices, merged into a single mixed-difficulty corpus
    senses_mixture: tuple[int, ...] = ()
    out_dir: str | None = None


_SECTIONS = {
    "arch": ArchConfig,
    "augment": AugmentConfig,
    "distill": DistillConfig,
    "synth": SynthConfig,
    "plain": PlainConfig,
    "train": TrainSettings,
}


def config_to_dict(cfg: RunConfig) -> dict:
    out = {name: dataclasses.asdict(getattr(cfg, name)) for name in _SECTIONS}
    out["senses_mixture"] = list(cfg.senses_mixture)
    out["out_dir"] = cfg.out_dir
    return out


def config_from_dict(raw: dict) -> RunConfig:
    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = dict(raw.get(name, {}))
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(section) - known
        if unknown:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
        for key, value in section.items():
            if isinstance(value, list):
                section[key] = tuple(value)
        kwargs[name] = cls(**section)
    return RunConfig(
        senses_mixture=tuple(raw.get("senses_mixture", ())),
        out_dir=raw.get("out_dir"),
        **kwargs,
    )


def load_run_config(path) -> RunConfig:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return config_from_dict(raw)


def save_run_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), ensure_ascii=False, indent=2) + "\n", encoding="utf-8")


def _slice_alphabet(alphabet: str, part: int, n_parts: int) -> str:
    chars = list(dict.fromkeys(alphabet))
    size = len(chars) // n_parts
    if size < 4:
        raise ConfigError("alphabet too small to slice for the sense mixture")
    lo = part * size
    return "".join(chars[lo : lo + size])


@dataclass
class CorpusBundle:
    data: GeneratedData
    plain: corpus_mod.PlainData
    teacher_vocab: Vocab
    student_vocab: Vocab

    @property
    def lexicon(self) -> Lexicon:
        return self.data.lexicon


def build_corpus(cfg: RunConfig) -> CorpusBundle:
    if cfg.senses_mixture:
        parts = []
        n = len(cfg.senses_mixture)
        for i, senses in enumerate(cfg.senses_mixture):
            sub = replace(
                cfg.synth,
                senses_per_homophone=senses,
                seed=cfg.synth.seed + i,
                n_sentences=cfg.synth.n_sentences // n,
                n_hanja_usage_sentences=cfg.synth.n_hanja_usage_sentences // n,
                hangul_alphabet=_slice_alphabet(cfg.synth.hangul_alphabet, i, n),
                hanja_alphabet=_slice_alphabet(cfg.synth.hanja_alphabet, i, n),
            )
            parts.append(corpus_mod.generate(sub))
        data = parts[0]
        for part in parts[1:]:
            data = corpus_mod.merge(data, part)
    else:
        data = corpus_mod.generate(cfg.synth)
    plain = corpus_mod.generate_plain(cfg.plain)
    # hanja characters belong to the base (teacher) alphabet: the teacher's
    # pretraining mix contains mixed-script text
    chars = sorted(
        {ch for w in data.word_inventory for ch in w}
        | {ch for w in plain.words for ch in w}
        | {ch for h in data.hanja_tokens for ch in h}
    )
    teacher_vocab = build_vocab(chars)
    new_tokens = list(data.word_inventory)
    if not cfg.augment.per_character_tokens:
        new_tokens += data.hanja_tokens
    student_vocab = expand_vocab(teacher_vocab, new_tokens)
    return CorpusBundle(data=data, plain=plain, teacher_vocab=teacher_vocab, student_vocab=student_vocab)


@dataclass
class TrainItem:
    seq_id: int
    aug: AugmentedSequence
    mask: np.ndarray
    teacher_ids: tuple[int, ...] | None = None
    alignment: AlignmentMap | None = None


def build_plain_items(sentences, vocab: Vocab) -> list[TrainItem]:
    items = []
    for i, text in enumerate(sentences):
        aug = plain_augmented(encode(vocab, text))
        items.append(TrainItem(seq_id=i, aug=aug, mask=causal_mask(len(aug.ids))))
    return items


def build_student_items(
    sentences,
    bundle: CorpusBundle,
    augment_cfg: AugmentConfig,
    candidate_context: str = "prefix",
    with_alignment: bool = True,
) -> list[TrainItem]:
    items = []
    for i, text in enumerate(sentences):
        enc = encode(bundle.student_vocab, text)
        aug = augment(enc, bundle.lexicon, bundle.student_vocab, augment_cfg)
        mask = build_attention_mask(aug, candidate_context=candidate_context)
        teacher_ids = None
        alignment = None
        if with_alignment:
            teacher_enc = encode(bundle.teacher_vocab, text)
            teacher_ids = teacher_enc.ids
            alignment = align(enc, teacher_enc)
        items.append(
            TrainItem(seq_id=i, aug=aug, mask=mask, teacher_ids=teacher_ids, alignment=alignment)
        )
    return items


def make_batch(items, pad_id: int = 0) -> tuple[np.ndarray, np.ndarray, list[AugmentedSequence]]:
    """Pad to the batch max length; pad positions self-attend only."""
    L = max(len(it.aug.ids) for it in items)
    B = len(items)
    ids = np.full((B, L), pad_id, dtype=np.int64)
    mask = np.zeros((B, L, L), dtype=bool)
    mask[:, np.arange(L), np.arange(L)] = True
    for b, it in enumerate(items):
        n = len(it.aug.ids)
        ids[b, :n] = it.aug.ids
        mask[b, :n, :n] = it.mask
    return ids, mask, [it.aug for it in items]


class MetricsLog:
    HEADER = "step\tlm_loss\tkd_loss\ttotal_loss\n"

    def __init__(self, path):
        self.path = Path(path)
        self.path.write_text(self.HEADER, encoding="utf-8")

    def append(self, step: int, metrics: dict) -> None:
        line = f"{step}\t{metrics['lm_loss']:.6f}\t{metrics['kd_loss']:.6f}\t{metrics['total_loss']:.6f}\n"
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line)


class _EpochSampler:
    """Deterministic reshuffling batch iterator."""

    def __init__(self, n_items: int, batch_size: int, seed: int):
        self.n = n_items
        self.batch_size = min(batch_size, n_items)
        self.seed = seed
        self.epoch = 0
        self.order: list[int] = []
        self.cursor = 0

    def next_batch(self) -> list[int]:
        if self.cursor + self.batch_size > len(self.order):
            rng = random.Random(self.seed * 1_000_003 + self.epoch)
            self.order = list(range(self.n))
            rng.shuffle(self.order)
            self.cursor = 0
            self.epoch += 1
        batch = self.order[self.cursor : self.cursor + self.batch_size]
        self.cursor += self.batch_size
        return batch


def _model_config(cfg: RunConfig, vocab_size: int, seed: int) -> ModelConfig:
    return ModelConfig(
        n_layers=cfg.arch.n_layers,
        n_heads=cfg.arch.n_heads,
        d_model=cfg.arch.d_model,
        d_ff=cfg.arch.d_ff,
        vocab_size=vocab_size,
        max_positions=cfg.arch.max_positions,
        seed=seed,
        tie_embeddings=cfg.arch.tie_embeddings,
    )


def pretrain_teacher(bundle: CorpusBundle, cfg: RunConfig, metrics_path=None) -> TinyLM:
    """Plain causal pretraining over the character-level teacher vocabulary.
    The mix models a multilingual base: the full spelling-usage corpus (its
    high-resource script), the domain-B text, and a slice of mixed-script
    domain-A text (the low-resource target language)."""
    n_a = int(round(len(bundle.data.train_sentences_inline) * cfg.train.teacher_mix_a))
    sentences = (
        list(bundle.data.hanja_usage_sentences)
        + list(bundle.data.train_sentences_inline[:n_a])
        + list(bundle.plain.train_sentences)
    )
    items = build_plain_items(sentences, bundle.teacher_vocab)
    model = init_model(_model_config(cfg, len(bundle.teacher_vocab), cfg.train.seed + 101))
    optimizer = make_optimizer(model, lr=cfg.train.teacher_lr)
    sampler = _EpochSampler(len(items), cfg.train.batch_size, seed=cfg.train.seed + 11)
    log = MetricsLog(metrics_path) if metrics_path else None
    loss_cfg = LossConfig(lambda_kd=0.0, reduction=cfg.train.reduction)
    for step in range(1, cfg.train.teacher_steps + 1):
        batch = [items[i] for i in sampler.next_batch()]
        ids, mask, augs = make_batch(batch, pad_id=bundle.teacher_vocab.pad_id)
        metrics = train_step(model, optimizer, ids, mask, augs, loss_cfg)
        if log:
            log.append(step, metrics)
    model.requires_grad_(False)
    model.eval()
    return model


@dataclass
class StudentRun:
    model: TinyLM
    checkpoint_paths: list[str]
    metrics_path: str | None


def train_student(
    bundle: CorpusBundle,
    teacher: TinyLM,
    cfg: RunConfig,
    *,
    k: int,
    lambda_kd: float,
    out_dir=None,
    tag: str = "student",
) -> StudentRun:
    """Continually pretrain one student variant. k > 0 trains on expanded
    inputs under the restricted mask; lambda_kd > 0 adds queue-based KD
    against the frozen teacher on the unaugmented text."""
    augment_cfg = replace(cfg.augment, k=k)
    use_kd = cfg.train.distill and lambda_kd > 0
    sentences = (
        bundle.data.train_sentences_inline
        if cfg.train.student_corpus == "inline"
        else bundle.data.train_sentences
    )
    items = build_student_items(
        sentences,
        bundle,
        augment_cfg,
        candidate_context=cfg.train.candidate_context,
        with_alignment=use_kd,
    )
    if not items:
        raise ConfigError("no training sentences")

    student = grow_vocab(teacher, len(bundle.student_vocab))
    student.requires_grad_(True)
    apply_freeze(student, cfg.train.freeze)
    optimizer = make_optimizer(student, lr=cfg.train.lr)
    loss_cfg = LossConfig(lambda_kd=lambda_kd, reduction=cfg.train.reduction)
    sampler = _EpochSampler(len(items), cfg.train.batch_size, seed=cfg.train.seed + 23)

    queue = InstanceQueue(cfg.distill.queue_capacity) if use_kd else None
    teacher_cache: dict[int, torch.Tensor] = {}

    def teacher_states_for(item: TrainItem) -> torch.Tensor:
        cached = teacher_cache.get(item.seq_id)
        if cached is None:
            cached = teacher_forward(
                teacher, item.teacher_ids, causal_mask(len(item.teacher_ids)),
                layer=cfg.distill.teacher_layer,
            )
            teacher_cache[item.seq_id] = cached
        return cached

    out_path = Path(out_dir) if out_dir else None
    log = None
    ckpt_dir = None
    if out_path:
        out_path.mkdir(parents=True, exist_ok=True)
        log = MetricsLog(out_path / "metrics.tsv")
        ckpt_dir = out_path / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)
    checkpoint_paths: list[str] = []

    def maybe_checkpoint(step: int) -> None:
        if ckpt_dir is None:
            return
        if step % cfg.train.checkpoint_interval == 0 or step == cfg.train.steps:
            path = ckpt_dir / f"{tag}_step{step:06d}.ckpt"
            if str(path) not in checkpoint_paths:
                save_checkpoint(path, student, step=step, optimizer=optimizer)
                checkpoint_paths.append(str(path))

    for step in range(1, cfg.train.steps + 1):
        batch = [items[i] for i in sampler.next_batch()]
        ids, mask, augs = make_batch(batch, pad_id=bundle.student_vocab.pad_id)

        distill_term = None
        if use_kd:
            t_states = [teacher_states_for(it) for it in batch]
            alignments = [it.alignment for it in batch]
            provs = [[(it.seq_id, ti) for _, ti in it.alignment.pairs] for it in batch]

            def distill_term(trace, _batch=batch, _t=t_states, _al=alignments, _pv=provs):
                s_states = [
                    trace.final_hidden[b][list(it.aug.original_positions)]
                    for b, it in enumerate(_batch)
                ]
                return kd_loss(s_states, _t, _al, queue, cfg.distill, provenance=_pv)

        metrics = train_step(student, optimizer, ids, mask, augs, loss_cfg, distill_term=distill_term)
        if use_kd:
            enqueue_batch(queue, t_states, alignments, seq_ids=[it.seq_id for it in batch])
        if log:
            log.append(step, metrics)
        maybe_checkpoint(step)

    return StudentRun(
        model=student,
        checkpoint_paths=checkpoint_paths,
        metrics_path=str(out_path / "metrics.tsv") if out_path else None,
    )


def mean_kl_to_teacher(student: TinyLM, teacher: TinyLM, sentences, teacher_vocab: Vocab) -> float:
    """Mean KL(teacher || student) of next-token distributions over the
    shared id range (the student vocab extends the teacher's), averaged over
    every position of the given sentences."""
    v_t = teacher.config.vocab_size
    total, count = 0.0, 0
    for text in sentences:
        ids = encode(teacher_vocab, text).ids
        if not ids:
            continue
        mask = causal_mask(len(ids))
        with torch.no_grad():
            t_logits, _ = teacher.forward(ids, mask)
            s_logits, _ = student.forward(ids, mask)
        log_p = F.log_softmax(t_logits, dim=-1)
        log_q = F.log_softmax(s_logits[:, :v_t], dim=-1)
        kl = (log_p.exp() * (log_p - log_q)).sum(dim=-1)
        total += float(kl.sum())
        count += kl.numel()
    return total / count if count else 0.0


def write_corpus_artifacts(bundle: CorpusBundle, out_dir) -> None:
    out = Path(out_dir)
    corpus_dir = out / "corpus"
    corpus_dir.mkdir(parents=True, exist_ok=True)
    save_lexicon(bundle.lexicon, corpus_dir / "lexicon.tsv")
    corpus_mod.save_sentences(bundle.data.train_sentences, corpus_dir / "train.txt")
    corpus_mod.save_sentences(bundle.data.train_sentences_inline, corpus_dir / "train_inline.txt")
    corpus_mod.save_annotated(bundle.data.eval_sentences, corpus_dir / "eval.jsonl")
    save_probe_items(bundle.data.probe_items, corpus_dir / "probe.jsonl")
    corpus_mod.save_sentences(bundle.plain.train_sentences, corpus_dir / "domain_b_train.txt")
    corpus_mod.save_sentences(bundle.plain.heldout_sentences, corpus_dir / "domain_b_heldout.txt")
    save_vocab(bundle.teacher_vocab, out / "vocab_teacher.txt")
    save_vocab(bundle.student_vocab, out / "vocab_student.txt")


def run_training(cfg: RunConfig) -> dict:
    """The `train` command: corpus, teacher, then the configured student."""
    if not cfg.out_dir:
        raise ConfigError("out_dir is required")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_run_config(cfg, out / "config.json")
    bundle = build_corpus(cfg)
    write_corpus_artifacts(bundle, out)
    teacher = pretrain_teacher(bundle, cfg, metrics_path=out / "teacher_metrics.tsv")
    save_checkpoint(out / "teacher.ckpt", teacher, step=cfg.train.teacher_steps)
    lambda_kd = cfg.train.lambda_kd if cfg.train.distill else 0.0
    run = train_student(
        bundle, teacher, cfg, k=cfg.augment.k, lambda_kd=lambda_kd, out_dir=out, tag="student"
    )
    summary = {
        "out_dir": str(out),
        "teacher_checkpoint": str(out / "teacher.ckpt"),
        "student_checkpoints": run.checkpoint_paths,
        "metrics": run.metrics_path,
        "k": cfg.augment.k,
        "lambda_kd": lambda_kd,
    }
    (out / "run_summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return summary
