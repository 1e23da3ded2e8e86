import itertools
import math

import numpy as np
import pytest

from cavitomo.channels import OUTCOMES, ExperimentParams, Outcome, poisson_weights
from cavitomo.effects import (
    Displace,
    EffectCompiler,
    MeasurementRecord,
    Sample,
    Wait,
    canonical_sequence,
    compile_effect,
    compile_effects,
    multi_res,
    qnd_scan,
    record_from_dict,
    record_to_dict,
    sensitivity_mask,
    single_res,
    stack_effects,
)
from cavitomo.fockspace import SpaceConfig


def filled(template, outcomes):
    return template.with_outcomes(outcomes)


def test_canonical_sequences():
    rec = single_res(1.3)
    assert rec.events == (Wait(1.3), Sample("res"))
    q = qnd_scan(0.1, 0.5, 0.0, n_samples=40, t_gap=0.2)
    assert isinstance(q.events[1], Displace)
    assert len(q.samples) == 40
    assert isinstance(q.events[-1], Sample)
    assert sum(isinstance(e, Wait) for e in q.events) == 1 + 39
    m = multi_res(40, 0.2)
    assert len(m.samples) == 40 and all(s.kind == "res" for s in m.samples)
    assert canonical_sequence("single_res", t=1.3) == rec
    with pytest.raises(ValueError):
        canonical_sequence("bogus")
    with pytest.raises(ValueError):
        multi_res(0)


def test_event_validation():
    with pytest.raises(ValueError):
        Wait(-1.0)
    with pytest.raises(ValueError):
        Sample("maybe")
    with pytest.raises(ValueError):
        MeasurementRecord(())
    assert Sample("res", "eg").outcome is Outcome.GE


def test_json_roundtrip():
    rec = MeasurementRecord((Wait(0.1), Displace(0.5 + 0.1j, -0.2), Sample("dis", Outcome.GE),
                             Wait(0.2), Sample("res", None)), id="x1")
    data = record_to_dict(rec)
    assert data["events"][1] == {"displace": [0.5, 0.1, -0.2, 0.0]}
    assert record_from_dict(data) == rec
    with pytest.raises(ValueError):
        record_from_dict({"events": [{"jump": 1}]})
    with pytest.raises(ValueError):
        record_from_dict({"id": "no events"})


def test_unfilled_record_rejected():
    with pytest.raises(ValueError, match="unfilled"):
        compile_effect(single_res(0.5), SpaceConfig(2, 2), ExperimentParams())


def test_none_outcome_at_zero_time_is_scalar_identity():
    space = SpaceConfig(3, 3)
    params = ExperimentParams(mean_atoms=0.2)
    pa = poisson_weights(params)
    eps = params.eps_det
    c = pa[0] + pa[1] * (1 - eps) + pa[2] * (1 - eps) ** 2
    E = compile_effect(filled(single_res(0.0), ["none"]), space, params).matrix
    low = [space.index(a, b) for a in range(2) for b in range(2)]
    np.testing.assert_allclose(E[np.ix_(low, low)], c * np.eye(4) / space.dim, atol=1e-12)


def test_ideal_dispersive_effect_is_parity_projector():
    space = SpaceConfig(2, 1)
    params = ExperimentParams(eps_det=1.0, eta_g=0.0, eta_e=0.0, forced_atoms=1)
    rec = MeasurementRecord((Sample("dis", Outcome.G),))
    E = compile_effect(rec, space, params).matrix
    np.testing.assert_allclose(E, np.diag([1.0, 0.0]) / 2, atol=1e-15)


def test_batch_compile_matches_single_compiles():
    space = SpaceConfig(3, 2)
    params = ExperimentParams()
    recs = [
        filled(single_res(0.7), ["g"]),
        filled(single_res(0.7), ["e"]),
        filled(qnd_scan(0.1, 0.4, 0, n_samples=3), ["g", "none", "ge"]),
        filled(single_res(0.2), ["none"]),
        filled(qnd_scan(0.1, 0.4, 0, n_samples=3), ["e", "e", "none"]),
    ]
    batch = compile_effects(recs, space, params)
    for rec, eff in zip(recs, batch):
        np.testing.assert_allclose(eff.matrix, compile_effect(rec, space, params).matrix, atol=1e-15)
        assert eff.record_id == rec.id


def test_effects_are_hermitian_psd():
    space = SpaceConfig(3, 3)
    params = ExperimentParams(mean_atoms=0.4)
    rng = np.random.default_rng(0)
    recs = [filled(multi_res(4, 0.2, t=0.3), [OUTCOMES[k] for k in rng.integers(0, 6, size=4)]) for _ in range(20)]
    for eff in compile_effects(recs, space, params):
        np.testing.assert_allclose(eff.matrix, eff.matrix.conj().T, atol=1e-14)
        assert np.linalg.eigvalsh(eff.matrix).min() >= -1e-12


def test_outcome_completeness_dispersive():
    # waits are unitary without relaxation, dispersive maps are complete on every level
    space = SpaceConfig(3, 3)
    params = ExperimentParams(tc1=math.inf, tc2=math.inf, mean_atoms=0.3)
    template = MeasurementRecord((Wait(0.3), Displace(0.4, -0.2j), Sample("dis"), Wait(0.25), Sample("dis")))
    seqs = list(itertools.product(OUTCOMES, repeat=2))
    E = stack_effects(compile_effects([filled(template, s) for s in seqs], space, params))
    mass = poisson_weights(params).sum()
    np.testing.assert_allclose(E.sum(axis=0), mass**2 * np.eye(9) / 9, atol=1e-12)


def test_outcome_completeness_resonant_on_buffered_block():
    space = SpaceConfig(4, 4)
    params = ExperimentParams(mean_atoms=0.3)
    E = stack_effects(compile_effects([filled(single_res(0.0), [mu]) for mu in OUTCOMES], space, params))
    mass = poisson_weights(params).sum()
    low = [space.index(a, b) for a in range(2) for b in range(2)]
    np.testing.assert_allclose(E.sum(axis=0)[np.ix_(low, low)], mass * np.eye(4) / 16, atol=1e-12)


def test_sensitivity_mask_blind_elements():
    space = SpaceConfig(3, 3)
    params = ExperimentParams()
    recs = [filled(qnd_scan(0.1, a, 0, n_samples=2), ["g", "e"]) for a in (0.3, 0.9)]
    recs += [filled(qnd_scan(0.1, 0, a, n_samples=2), ["e", "none"]) for a in (0.3, 0.9)]
    mask = sensitivity_mask(compile_effects(recs, space, params))
    i, j = space.index(1, 0), space.index(0, 1)
    assert mask[i, j] == 0.0
    assert mask[space.index(1, 0), space.index(0, 0)] > 0
    with pytest.raises(ValueError):
        sensitivity_mask(np.zeros((0, 2, 2)))


def test_compiler_reuse_and_stack_shapes():
    compiler = EffectCompiler(SpaceConfig(2, 2), ExperimentParams())
    eff = compiler.compile(filled(single_res(0.4), ["g"]))
    assert eff.matrix.shape == (4, 4)
    with pytest.raises(ValueError):
        stack_effects(np.zeros((2, 3)))
