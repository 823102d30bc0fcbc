import numpy as np
import pytest

from daclab.datagen import AugConfig, Experience, OODSource
from daclab.dcl import (
    AdaptConfig,
    InitMessage,
    MessageLog,
    SCMessage,
    TeacherResidency,
    adapt,
    consolidate,
    initial_model,
    naive_finetune_baseline,
    naive_finetune_run,
    run_independent,
    run_sequential,
)
from daclab.errors import ArchMismatchError, ProtocolError
from daclab.eval import agreement, task_accuracy
from daclab.losses import ConsolidationConfig
from daclab.models import ArchSpec, backbone_bytes, model_to_bytes
from toys import TOY_ARCH, toy_experience, toy_stream

FAST_ADAPT = AdaptConfig(iterations=150, learning_rate=1e-2, batch_size=32)
FAST_CONS = ConsolidationConfig(iterations=40, learning_rate=1e-3, temperature=1.0, batch_size=32)
TOY_AUG = AugConfig(out_size=(4, 4), channels=1)


def real_data(exp):
    return OODSource.real_data(exp.train_x)


def adapted(exp, seed=0, cfg=FAST_ADAPT):
    init = InitMessage.from_model(initial_model(TOY_ARCH, seed), exp.task_id)
    return adapt(init, exp, cfg, TOY_ARCH, seed)


# -- messages and bookkeeping ------------------------------------------------------

def test_message_log_checks_two_messages_per_device():
    log = MessageLog()
    for step in (1, 2):
        log.record(step, "init", b"a")
        log.record(step, "sc", b"b")
    log.check(2)
    assert log.records[0]["bytes"] == 1 and len(log.records[0]["sha256"]) == 64
    log.record(2, "sc", b"c")
    with pytest.raises(ProtocolError, match="device 2"):
        log.check(2)
    with pytest.raises(ValueError):
        log.record(1, "broadcast", b"")


def test_teacher_residency_limit():
    r = TeacherResidency()
    with r.hold("a"), r.hold(None), r.hold("b"):
        with pytest.raises(ProtocolError):
            with r.hold("c"):
                pass
    assert r.current == 0 and r.peak == 2


def test_sc_message_validates_payload():
    sc = adapted(toy_experience(1, [0, 1])).model
    msg = SCMessage.from_model(sc)
    assert msg.model().task_id == 1
    with pytest.raises(ProtocolError):
        SCMessage(msg.payload, 2, msg.classes).model()
    with pytest.raises(ProtocolError, match="one head"):
        SCMessage(model_to_bytes(initial_model(TOY_ARCH, 0)), 1, (0, 1)).model()


# -- adaptation ---------------------------------------------------------------------

def test_adapt_fits_separable_task():
    res = adapted(toy_experience(1, [0, 1]))
    assert res.train_accuracy >= 0.99
    assert len(res.model.classes) == 2


def test_adapt_is_deterministic():
    a, b = adapted(toy_experience(1, [0, 1]), seed=3), adapted(toy_experience(1, [0, 1]), seed=3)
    assert model_to_bytes(a.model) == model_to_bytes(b.model)


def test_adapt_rejects_bad_inputs():
    with pytest.raises(ValueError):
        AdaptConfig(iterations=0)
    exp = toy_experience(1, [0, 1])
    with pytest.raises(ValueError, match="not in"):
        Experience(1, (0, 1), exp.train_x, exp.train_y + 5, exp.test_x, exp.test_y)
    init = InitMessage.from_model(initial_model(ArchSpec("mlp", (1, 4, 4), hidden=(4,)), 0), 1)
    with pytest.raises(ArchMismatchError):
        adapt(init, exp, FAST_ADAPT, TOY_ARCH, 0)


# -- consolidation -------------------------------------------------------------------

def test_first_consolidation_has_only_the_sc_term():
    exp = toy_experience(1, [0, 1])
    sc = adapted(exp).model
    cfg = ConsolidationConfig(iterations=3, lam=0.0, log_every=1, student_init="random", temperature=1.0)
    res = consolidate(None, SCMessage.from_model(sc), real_data(exp), cfg, 0, TOY_AUG)
    assert res.model.task_ids == [1]
    assert res.peak_teachers == 1
    for _, total, dkd, pld in res.losses:
        assert total == dkd and pld == 0.0


def test_copied_student_starts_at_zero_loss():
    exp = toy_experience(1, [0, 1])
    sc = adapted(exp).model
    cfg = ConsolidationConfig(iterations=1, lam=0.5, student_init="sc", temperature=1.0)
    res = consolidate(initial_model(TOY_ARCH, 0), SCMessage.from_model(sc), real_data(exp), cfg, 0, TOY_AUG)
    assert abs(res.initial_loss) <= 1e-5


def test_two_task_consolidation_agrees_with_teachers():
    stream = toy_stream(2, 2)
    cons = ConsolidationConfig(iterations=300, learning_rate=3e-3, temperature=1.0, batch_size=32)
    res = run_sequential(stream, TOY_ARCH, FAST_ADAPT, cons, real_data, 0, TOY_AUG)
    final = res.model
    # the head for task 1 is compared against the task-1 SC model, task 2 against its own SC model
    for k, exp in enumerate(stream, 1):
        assert agreement(final, k, res.sc_models[k - 1], k, exp.test_x) >= 0.9, k
    assert res.peak_teachers == 2


def test_consolidate_rejects_protocol_violations():
    s1, s2 = toy_stream(2, 2)
    sc1 = SCMessage.from_model(adapted(s1).model)
    first = consolidate(None, sc1, real_data(s1), FAST_CONS, 0, TOY_AUG).model
    with pytest.raises(ProtocolError, match="already"):
        consolidate(first, sc1, real_data(s1), FAST_CONS, 0, TOY_AUG)
    other = ArchSpec("mlp", (1, 4, 4), hidden=(16, 7))
    with pytest.raises(ArchMismatchError):
        consolidate(initial_model(other, 0), SCMessage.from_model(adapted(s2).model), real_data(s2), FAST_CONS, 0, TOY_AUG)


def test_consolidate_refuses_a_third_teacher():
    s1, s2 = toy_stream(2, 2)
    first = consolidate(None, SCMessage.from_model(adapted(s1).model), real_data(s1), FAST_CONS, 0, TOY_AUG).model
    busy = TeacherResidency()
    with busy.hold("someone else"):
        with pytest.raises(ProtocolError):
            consolidate(first, SCMessage.from_model(adapted(s2).model), real_data(s2), FAST_CONS, 0, TOY_AUG, busy)


# -- orchestration ------------------------------------------------------------------------

def test_sequential_single_task():
    res = run_sequential(toy_stream(1), TOY_ARCH, FAST_ADAPT, FAST_CONS, real_data, 0, TOY_AUG)
    assert res.accuracy.n == 1 and len(res.snapshots) == 1
    assert [r["direction"] for r in res.log.records] == ["init", "sc"]
    assert res.handoff_equal == [True]


def test_sequential_handoff_and_determinism():
    stream = toy_stream(3, 2)
    a = run_sequential(stream, TOY_ARCH, FAST_ADAPT, FAST_CONS, real_data, 1, TOY_AUG)
    b = run_sequential(stream, TOY_ARCH, FAST_ADAPT, FAST_CONS, real_data, 1, TOY_AUG)
    assert a.handoff_equal == [True] * 3
    assert [len(m.heads) for m in a.snapshots] == [1, 2, 3]
    assert a.accuracy.to_csv() == b.accuracy.to_csv()
    assert a.log.to_json() == b.log.to_json()
    # the init message at step t carries the model consolidated at step t-1
    init_hashes = [r["sha256"] for r in a.log.records if r["direction"] == "init"]
    assert len(set(init_hashes)) == 3


def test_independent_inits_identical_and_parallel_matches_serial():
    stream = toy_stream(3, 2)
    serial = run_independent(stream, TOY_ARCH, FAST_ADAPT, FAST_CONS, real_data, 2, TOY_AUG, workers=1)
    parallel = run_independent(stream, TOY_ARCH, FAST_ADAPT, FAST_CONS, real_data, 2, TOY_AUG, workers=3)
    inits = [r for r in serial.log.records if r["direction"] == "init"]
    assert len({r["sha256"] for r in inits}) == 1
    assert serial.accuracy == parallel.accuracy
    assert serial.log.to_json() == parallel.log.to_json()
    assert backbone_bytes(serial.model) == backbone_bytes(parallel.model)
    assert serial.accuracy.n == 3 and len(serial.accuracy.row(3)) == 3


def test_stream_must_be_numbered_from_one():
    with pytest.raises(ValueError):
        run_sequential([], TOY_ARCH, FAST_ADAPT, FAST_CONS, real_data, 0)
    with pytest.raises(ValueError):
        run_sequential(toy_stream(2)[1:], TOY_ARCH, FAST_ADAPT, FAST_CONS, real_data, 0)


def test_naive_single_task_equals_adaptation():
    stream = toy_stream(1)
    naive = naive_finetune_run(stream, TOY_ARCH, FAST_ADAPT, 5)
    dac = run_sequential(stream, TOY_ARCH, FAST_ADAPT, FAST_CONS, real_data, 5, TOY_AUG)
    assert naive.accuracy.get(1, 1) == dac.sc_accuracy[0]
    assert task_accuracy(naive.model, stream[0]) == task_accuracy(dac.sc_models[0], stream[0])
    assert naive.log.records == []


def test_naive_baseline_is_deterministic():
    stream = toy_stream(2)
    assert naive_finetune_baseline(stream, TOY_ARCH, FAST_ADAPT, 0) == naive_finetune_baseline(stream, TOY_ARCH, FAST_ADAPT, 0)
