import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import enumerate_posteriors, random_intensity
from gdhmm.core_model import (
    Dataset,
    EmissionMatrix,
    InitialDistribution,
    ModelDims,
    SubjectRecord,
)
from gdhmm.em import FitConfig
from gdhmm.hmm_baseline import HmmParams, fit_hmm, hmm_decode, hmm_decode_dataset
from gdhmm.simulate import SimulationConfig, make_study


def _random_hmm(rng, S):
    return HmmParams(
        InitialDistribution(rng.dirichlet(np.ones(S))),
        random_intensity(rng, S),
        EmissionMatrix(rng.dirichlet(np.ones(S) * 2, size=S)),
    )


def _subject(rng, S, m, final=False):
    t = np.concatenate([[0.0], np.sort(rng.uniform(0.1, 8, m - 1))])
    z = rng.integers(0, S, m)
    return SubjectRecord("a", t, np.zeros((m, 1)), z, final, int(z[-1]) if final else None)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), final=st.booleans())
def test_decode_matches_enumeration(seed, final):
    rng = np.random.default_rng(seed)
    S = int(rng.integers(2, 4))
    m = int(rng.integers(2, 7))
    hmm = _random_hmm(rng, S)
    s = _subject(rng, S, m, final)
    dec = hmm_decode(hmm, s.times, s.surrogate, s.final_state)
    gamma, _, _, best = enumerate_posteriors(hmm.as_model(ModelDims(S, 1, 10.0)), s, None)
    np.testing.assert_allclose(dec.posterior, gamma, atol=1e-10)
    np.testing.assert_array_equal(dec.path, best)


def test_identity_emission_path_equals_labels(rng):
    hmm = _random_hmm(rng, 3)
    hmm = HmmParams(hmm.init, hmm.intensity, EmissionMatrix(np.eye(3)))
    for _ in range(10):
        s = _subject(rng, 3, 6)
        z = np.array(s.surrogate)
        # labels must be reachable under the full mask, which they are
        np.testing.assert_array_equal(hmm_decode(hmm, s.times, z).path, z)


def test_dataset_decoding_matches_single_subjects(small_study):
    hmm = fit_hmm(small_study.train, FitConfig(hmm_max_iter=5))
    post, path = hmm_decode_dataset(hmm, small_study.train)
    off = 0
    for s in small_study.train.subjects:
        one = hmm_decode(hmm, s.times, s.surrogate, s.final_state)
        np.testing.assert_allclose(post[off : off + s.num_visits], one.posterior, atol=1e-12)
        np.testing.assert_array_equal(path[off : off + s.num_visits], one.path)
        off += s.num_visits


def test_loglik_nondecreasing(small_study):
    hmm = fit_hmm(small_study.train, FitConfig(hmm_max_iter=25, seed=4))
    tr = np.array(hmm.loglik_trace)
    assert np.all(np.diff(tr) >= -1e-8 * np.maximum(1.0, np.abs(tr[:-1])))


def test_constant_labels_single_subject():
    s = SubjectRecord("a", np.arange(5.0), np.zeros((5, 1)), np.zeros(5, dtype=int))
    hmm = fit_hmm(Dataset((s,), ModelDims(2, 1, 4.0)), FitConfig(hmm_max_iter=50))
    # every state ends up emitting the only label seen
    np.testing.assert_allclose(hmm.emission.e[:, 0], 1.0, atol=1e-6)
    assert hmm.loglik_trace[-1] > -1e-6


def test_perfect_surrogates_recover_identity():
    sim = SimulationConfig(n=500, emission=tuple(map(tuple, np.eye(4))), seed=8)
    study = make_study(sim)
    from gdhmm.simulate import canonical_mask

    hmm = fit_hmm(study.train, FitConfig(structure_mask=canonical_mask(), hmm_max_iter=50))
    off = hmm.emission.e[~np.eye(4, dtype=bool)]
    assert np.max(off) < 0.02
