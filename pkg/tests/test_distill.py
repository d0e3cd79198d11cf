import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from hanjabridge.augment import causal_mask
from hanjabridge.distill import (
    AlignmentMap,
    DistillConfig,
    InstanceQueue,
    align,
    enqueue_batch,
    kd_loss,
    sim_distribution,
    teacher_forward,
)
from hanjabridge.errors import AlignmentError, ConfigError, NumericalError
from hanjabridge.model import ModelConfig, init_model
from hanjabridge.tokenizer import build_vocab, encode


def test_align_fragmented_word_uses_last_subword():
    student = build_vocab(["가격", "을"])
    teacher = build_vocab(["가", "격", "을"])
    text = "가격을"
    amap = align(encode(student, text), encode(teacher, text))
    # student token 0 = "가격" (0,2); teacher rep = "격" at index 1
    assert amap.pairs == ((0, 1), (1, 2))
    assert amap.skipped == ()


def test_align_identity_when_tokenizations_match():
    vocab = build_vocab(["가격", "을"])
    enc = encode(vocab, "가격 을 가격")
    amap = align(enc, enc)
    assert amap.pairs == ((0, 0), (1, 1), (2, 2))


def test_align_skips_crossing_boundaries():
    student = build_vocab(["abc"])
    teacher = build_vocab(["ab", "cd"])
    text = "abcd"
    s_enc, t_enc = encode(student, text), encode(teacher, text)
    assert s_enc.spans == ((0, 3), (3, 4))
    assert t_enc.spans == ((0, 2), (2, 4))
    amap = align(s_enc, t_enc)
    assert amap.pairs == ()
    assert set(amap.skipped) == {0, 1}


def test_align_pairs_end_at_same_character():
    student = build_vocab(["가격", "나무", "을"])
    teacher = build_vocab(["가", "격", "나", "무", "을"])
    text = "가격을 나무"
    s_enc, t_enc = encode(student, text), encode(teacher, text)
    amap = align(s_enc, t_enc)
    assert amap.pairs
    for si, ti in amap.pairs:
        assert s_enc.spans[si][1] == t_enc.spans[ti][1]


def test_align_requires_same_text():
    vocab = build_vocab(["가"])
    with pytest.raises(AlignmentError):
        align(encode(vocab, "가"), encode(vocab, "가 가"))


def test_sim_distribution_degenerate_and_limits():
    z = torch.tensor([1.0, 0.0])
    single = sim_distribution(z, z[None, :], tau=0.2)
    assert torch.allclose(single, torch.tensor([1.0]))

    queue_plus = torch.tensor([[1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    wide = sim_distribution(z, queue_plus, tau=1e6)
    assert torch.allclose(wide, torch.full((3,), 1 / 3), atol=1e-5)


def test_sim_distribution_hand_computed():
    z = torch.tensor([2.0, 0.0], dtype=torch.float64)
    refs = torch.tensor([[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]], dtype=torch.float64)
    tau = 0.2
    got = sim_distribution(z, refs, tau=tau, normalize=True)
    dots = [1.0, 1 / math.sqrt(2), 0.0]
    exps = [math.exp(d / tau) for d in dots]
    expected = torch.tensor([e / sum(exps) for e in exps], dtype=torch.float64)
    assert torch.allclose(got, expected, atol=1e-12)
    raw = sim_distribution(z, refs, tau=tau, normalize=False)
    exps_raw = [math.exp(2.0 / tau), math.exp(2.0 / tau), math.exp(0.0)]
    assert torch.allclose(raw, torch.tensor([e / sum(exps_raw) for e in exps_raw], dtype=torch.float64))


def test_sim_distribution_zero_norm_errors():
    with pytest.raises(NumericalError):
        sim_distribution(torch.zeros(3), torch.ones(2, 3), tau=0.2)


def kd_brute_force(z_s, z_t, queue_vecs, tau_t, tau_s, normalize=True):
    """Independent double-sum oracle."""
    def unit(v):
        return v / v.norm()

    total = 0.0
    n = len(z_s)
    for i in range(n):
        d_plus = [z_t[i]] + list(queue_vecs)
        zs_i, zt_i = z_s[i], z_t[i]
        if normalize:
            d_plus = [unit(d) for d in d_plus]
            zs_i, zt_i = unit(zs_i), unit(zt_i)
        logits_t = torch.tensor([float(zt_i @ d) / tau_t for d in d_plus], dtype=torch.float64)
        logits_s = torch.tensor([float(zs_i @ d) / tau_s for d in d_plus], dtype=torch.float64)
        p_t = torch.softmax(logits_t, dim=0)
        log_p_s = torch.log_softmax(logits_s, dim=0)
        total += float(-(p_t * log_p_s).sum())
    return total / n


def test_kd_loss_matches_brute_force_oracle():
    torch.manual_seed(0)
    d = 6
    z_s = torch.randn(2, d, dtype=torch.float64)
    z_t = torch.randn(2, d, dtype=torch.float64)
    queue = InstanceQueue(capacity=8)
    queue_vecs = [torch.randn(d, dtype=torch.float64) for _ in range(3)]
    for i, v in enumerate(queue_vecs):
        queue.push(v, seq_id=99, position=i)
    cfg = DistillConfig(tau_teacher=0.01, tau_student=0.2, queue_capacity=8)
    amap = AlignmentMap(pairs=((0, 0), (1, 1)), skipped=())
    got = float(kd_loss(z_s, z_t, amap, queue, cfg))
    want = kd_brute_force(z_s, z_t, queue_vecs, 0.01, 0.2)
    assert got == pytest.approx(want, abs=1e-10)


def test_kd_loss_empty_queue_is_zero():
    z = torch.randn(1, 4, dtype=torch.float64)
    cfg = DistillConfig()
    amap = AlignmentMap(pairs=((0, 0),), skipped=())
    loss = kd_loss(z, z.clone(), amap, InstanceQueue(capacity=4), cfg)
    assert float(loss) == 0.0


def test_kd_loss_equals_teacher_entropy_when_distributions_match():
    torch.manual_seed(1)
    d = 5
    z_t = torch.randn(3, d, dtype=torch.float64)
    queue = InstanceQueue(capacity=8)
    for i in range(4):
        queue.push(torch.randn(d, dtype=torch.float64), seq_id=50, position=i)
    tau = 0.2
    cfg = DistillConfig(tau_teacher=tau, tau_student=tau, queue_capacity=8)
    amap = AlignmentMap(pairs=tuple((i, i) for i in range(3)), skipped=())
    loss = float(kd_loss(z_t.clone(), z_t, amap, queue, cfg))

    queue_mat, _ = queue.snapshot()
    entropies = []
    for i in range(3):
        z = z_t[i] / z_t[i].norm()
        refs = torch.cat([z_t[i][None], queue_mat])
        refs = refs / refs.norm(dim=1, keepdim=True)
        p = torch.softmax(refs @ z / tau, dim=0)
        entropies.append(float(-(p * p.log()).sum()))
    assert loss == pytest.approx(sum(entropies) / 3, abs=1e-10)
    # and matched distributions minimize: any other student states do worse
    other = float(kd_loss(torch.randn(3, d, dtype=torch.float64), z_t, amap, queue, cfg))
    assert other >= loss - 1e-12


def test_kd_loss_gradient_reaches_student_only():
    torch.manual_seed(2)
    d = 4
    z_s = torch.randn(2, d, dtype=torch.float64, requires_grad=True)
    z_t = torch.randn(2, d, dtype=torch.float64, requires_grad=True)
    queue_vec = torch.randn(d, dtype=torch.float64, requires_grad=True)
    queue = InstanceQueue(capacity=4)
    queue.push(queue_vec, seq_id=0, position=0)
    cfg = DistillConfig()
    amap = AlignmentMap(pairs=((0, 0), (1, 1)), skipped=())
    loss = kd_loss(z_s, z_t, amap, queue, cfg)
    loss.backward()
    assert z_s.grad is not None and float(z_s.grad.abs().sum()) > 0
    assert z_t.grad is None or float(z_t.grad.abs().sum()) == 0.0
    assert queue_vec.grad is None or float(queue_vec.grad.abs().sum()) == 0.0


def test_kd_loss_dimension_mismatch_and_projection():
    z_s = torch.randn(1, 4, dtype=torch.float64)
    z_t = torch.randn(1, 6, dtype=torch.float64)
    queue = InstanceQueue(capacity=4)
    queue.push(torch.randn(6, dtype=torch.float64), seq_id=0, position=0)
    cfg = DistillConfig()
    amap = AlignmentMap(pairs=((0, 0),), skipped=())
    with pytest.raises(ConfigError, match="projection"):
        kd_loss(z_s, z_t, amap, queue, cfg)
    proj = torch.nn.Linear(4, 6, dtype=torch.float64)
    loss = kd_loss(z_s, z_t, amap, queue, cfg, projection=proj)
    loss.backward()
    assert proj.weight.grad is not None


def test_kd_loss_provenance_dedupe():
    torch.manual_seed(3)
    d = 4
    z_t = torch.randn(1, d, dtype=torch.float64)
    z_s = torch.randn(1, d, dtype=torch.float64)
    cfg = DistillConfig(tau_teacher=0.5, tau_student=0.5)
    amap = AlignmentMap(pairs=((0, 0),), skipped=())

    stale = InstanceQueue(capacity=8)
    stale.push(z_t[0], seq_id=7, position=0)      # same position re-visited
    stale.push(torch.randn(d, dtype=torch.float64), seq_id=8, position=0)
    deduped = float(kd_loss(z_s, z_t, amap, stale, cfg, provenance=[[(7, 0)]]))

    fresh = InstanceQueue(capacity=8)
    fresh.push(stale.snapshot()[0][1], seq_id=8, position=0)
    want = float(kd_loss(z_s, z_t, amap, fresh, cfg))
    assert deduped == pytest.approx(want, abs=1e-12)


def test_queue_fifo_eviction():
    queue = InstanceQueue(capacity=4)
    for i in range(6):
        queue.push(torch.full((2,), float(i)), seq_id=0, position=i)
    mat, prov = queue.snapshot()
    assert len(queue) == 4
    assert [int(v[0]) for v in mat] == [2, 3, 4, 5]
    assert [p for _, p in prov] == [2, 3, 4, 5]


def test_queue_rejects_non_teacher_sources_and_empty_push():
    queue = InstanceQueue(capacity=4)
    with pytest.raises(ConfigError):
        queue.push(torch.ones(2), seq_id=0, position=0, source="student")
    enqueue_batch(queue, [], [], seq_ids=[])
    assert len(queue) == 0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 100), min_size=0, max_size=30), st.integers(1, 8))
def test_queue_order_equals_insertion_order(values, capacity):
    queue = InstanceQueue(capacity=capacity)
    for i, v in enumerate(values):
        queue.push(torch.tensor([float(v)]), seq_id=0, position=i)
    expected = values[-capacity:]
    mat, _ = queue.snapshot()
    got = [] if mat is None else [int(x[0]) for x in mat]
    assert got == expected


def test_enqueue_batch_pushes_aligned_teacher_vectors():
    queue = InstanceQueue(capacity=16)
    t1 = torch.arange(8.0).reshape(4, 2)
    amap = AlignmentMap(pairs=((0, 1), (1, 3)), skipped=(2,))
    enqueue_batch(queue, [t1], [amap], seq_ids=[42])
    mat, prov = queue.snapshot()
    assert torch.equal(mat, t1[[1, 3]])
    assert prov == [(42, 1), (42, 3)]


def test_teacher_forward_is_frozen_and_deterministic():
    cfg = ModelConfig(n_layers=2, n_heads=2, d_model=8, d_ff=16, vocab_size=12,
                      max_positions=16, seed=0)
    teacher = init_model(cfg)
    teacher.requires_grad_(False)
    before = {k: v.numpy().tobytes() for k, v in teacher.state_dict().items()}
    ids = [3, 4, 5]
    h1 = teacher_forward(teacher, ids, causal_mask(3))
    h2 = teacher_forward(teacher, ids, causal_mask(3))
    assert torch.equal(h1, h2)
    assert h1.shape == (3, cfg.d_model)
    assert not h1.requires_grad
    layer0 = teacher_forward(teacher, ids, causal_mask(3), layer=0)
    assert not torch.equal(layer0, h1)
    after = {k: v.numpy().tobytes() for k, v in teacher.state_dict().items()}
    assert before == after


def test_teacher_forward_fragmented_shape():
    cfg = ModelConfig(n_layers=1, n_heads=1, d_model=8, d_ff=16, vocab_size=24,
                      max_positions=16, seed=1)
    teacher = init_model(cfg)
    teacher_vocab = build_vocab(["가", "격", "을"])
    enc = encode(teacher_vocab, "가격을")
    h = teacher_forward(teacher, enc.ids, causal_mask(len(enc.ids)))
    assert h.shape[0] == len(enc.ids) == 3
