import numpy as np
import pytest

from mrti.conditioning import MultiResEmbeddingSet
from mrti.diffusion import NoiseSchedule
from mrti.errors import DomainError, NumericError
from mrti.prompt import compile_prompt, parse
from mrti.samplers import ConditioningPolicy, PolicyKind, ancestral_sample, policy_embedding

from helpers import random_small_model

T_FIXED_GRID = np.round(np.arange(0, 11) / 10, 10)
T_GRID = np.round(np.arange(0, 101) / 100, 10)


@pytest.fixture(scope="module")
def model():
    return random_small_model(21)


@pytest.fixture(scope="module")
def emb():
    return MultiResEmbeddingSet("jane", np.random.default_rng(5).standard_normal((10, 3)))


def brute_interp(E, t):
    """Interpolation through bucket centers, evaluated by scanning segments."""
    T = len(E)
    centers = [(k + 0.5) / T for k in range(T)]
    if t <= centers[0]:
        return E[0]
    if t >= centers[-1]:
        return E[-1]
    for k in range(T - 1):
        if centers[k] <= t <= centers[k + 1]:
            if t == centers[k]:
                return E[k]
            if t == centers[k + 1]:
                return E[k + 1]
            w = (t * T - 0.5) - k
            return (1 - w) * E[k] + w * E[k + 1]
    raise AssertionError("unreachable")


def brute_table(E, null, kind, tf, t):
    if kind == "fixed":
        return brute_interp(E, tf)
    if t >= tf:
        return brute_interp(E, t)
    return null if kind == "semi" else brute_interp(E, tf)


def test_policy_matches_brute_force_table(model, emb):
    null = model["token_table"][0]
    for kind in ("fixed", "semi", "full"):
        for tf in T_FIXED_GRID:
            pol = ConditioningPolicy(kind, float(tf))
            for t in T_GRID:
                got = policy_embedding(emb, pol, float(t), model)
                want = brute_table(emb.embeddings, null, kind, float(tf), float(t))
                assert np.array_equal(got, want), (kind, tf, t)


@pytest.mark.parametrize("kind,tf,t,expect", [
    ("semi", 0.8, 0.9, "interp"), ("semi", 0.8, 0.5, "null"), ("full", 0.5, 0.3, "tf"), ("fixed", 0.0, 0.77, "tf"),
    ("semi", 0.8, 0.8, "interp"),
])
def test_policy_examples(model, emb, kind, tf, t, expect):
    from mrti.conditioning import embedding_at

    got = policy_embedding(emb, ConditioningPolicy(kind, tf), t, model)
    want = {"interp": embedding_at(emb, t), "null": model["token_table"][0], "tf": embedding_at(emb, tf)}[expect]
    assert got.tobytes() == np.asarray(want).tobytes()


def test_static_and_bucketed(model, emb):
    assert policy_embedding(emb, ConditioningPolicy.static(), 0.3, model).tobytes() == emb.embeddings[0].tobytes()
    got = policy_embedding(emb, ConditioningPolicy.full(0.0), 0.57, model, bucketed=True)
    assert got.tobytes() == emb.embeddings[5].tobytes()


def test_policy_domain(model, emb):
    with pytest.raises(DomainError):
        ConditioningPolicy("semi", 1.5)
    with pytest.raises(DomainError):
        policy_embedding(emb, ConditioningPolicy.semi(0.5), -0.1, model)


def _trace(model, emb, text, seed=3, **kw):
    sched = NoiseSchedule.linear()
    sch = compile_prompt(parse(text, {"jane": emb}), {"jane": emb}, model, **kw)
    return ancestral_sample(model, sched, sch, seed, n=2, return_trace=True)


def test_sampling_is_deterministic(model, emb):
    a, ta = _trace(model, emb, "a <jane(0.4)>")
    b, tb = _trace(model, emb, "a <jane(0.4)>")
    assert a.tobytes() == b.tobytes()
    assert ta.to_dict() == tb.to_dict()
    c, _ = _trace(model, emb, "a <jane(0.4)>", seed=4)
    assert c.tobytes() != a.tobytes()


def test_trace_tags(model, emb):
    _, tr = _trace(model, emb, "<jane|0.3|>")
    assert len(tr.records) == 100
    assert {tuple(r.sources) for r in tr.records} == {("interpolated(0.3)",)}
    assert [r.step for r in tr.records] == list(range(99, -1, -1))
    assert tr.records[-1].rng_checksum is None and all(r.rng_checksum for r in tr.records[:-1])

    _, tr = _trace(model, emb, "<jane(0.5)>")
    tags = [r.sources[0] for r in tr.records]
    first_null = next(i for i, tag in enumerate(tags) if tag == "null")
    assert tr.records[first_null].t < 0.5 <= tr.records[first_null - 1].t
    assert all(tag == "null" for tag in tags[first_null:])
    assert all(tag.startswith("interpolated") for tag in tags[:first_null])


def test_semi_and_full_agree_above_t_fixed(model, emb):
    _, ts = _trace(model, emb, "a <jane(0.6)>")
    _, tf = _trace(model, emb, "a <jane[0.6]>")
    for rs, rf in zip(ts.records, tf.records):
        if rs.t >= 0.6:
            assert rs.sources == rf.sources and rs.rng_checksum == rf.rng_checksum
        else:
            assert rs.sources == ["null"] and rf.sources == ["interpolated(0.6)"]


def test_zero_t_fixed_policies_share_sources(model, emb):
    traces = [_trace(model, emb, f"<jane{o}0.0{c}>")[1] for o, c in ("()", "[]")]
    for recs in zip(*(t.records for t in traces)):
        if recs[0].t > 0:
            assert recs[0].sources == recs[1].sources == [f"interpolated({recs[0].t:.6g})"]


def test_bucketed_lookup_tags(model, emb):
    _, tr = _trace(model, emb, "<jane[0.0]>", bucketed_lookup=True)
    assert tr.records[0].sources == ["bucket-9"]
    assert tr.records[-1].sources == ["bucket-0"]


def test_non_finite_state_aborts_with_step():
    def bad(z, t, cond):
        return np.full_like(z, np.nan) if t < 0.5 else np.zeros_like(z)

    with pytest.raises(NumericError, match="step 49"):
        ancestral_sample(None, NoiseSchedule.linear(), None, 0, n=2, denoiser=bad, data_dim=3)


def gaussian_denoiser(sched, mu, sigma):
    """Exact E[eps | z] for data N(mu, diag(sigma^2))."""

    def den(z, t, cond):
        ab = sched.alpha_bar[sched.step_index(t)]
        return np.sqrt(1 - ab) * (z - np.sqrt(ab) * mu) / (ab * sigma ** 2 + 1 - ab)

    return den


def predicted_moments(sched, mu, sigma):
    """Mean and variance after the reverse chain, propagated in closed form."""
    m, v = np.zeros_like(mu), np.ones_like(mu)
    for k in range(sched.num_steps - 1, -1, -1):
        b, ab = sched.beta[k], sched.alpha_bar[k]
        g = b / np.sqrt(1 - ab) * np.sqrt(1 - ab) / (ab * sigma ** 2 + 1 - ab)
        a = (1 - g) / np.sqrt(1 - b)
        m = a * m + g * np.sqrt(ab) * mu / np.sqrt(1 - b)
        v = a * a * v + sched.posterior_variance(k)
    return m, v


def check_moments(x, mu, var):
    n = len(x)
    se_mean = np.sqrt(var / n)
    se_var = var * np.sqrt(2 / (n - 1))
    cov = np.cov(x, rowvar=False)
    sd = np.sqrt(var)
    off = ~np.eye(len(mu), dtype=bool)
    return (np.all(np.abs(x.mean(0) - mu) < 3 * se_mean)
            and np.all(np.abs(np.diag(cov) - var) < 3 * se_var)
            and np.all(np.abs(cov[off]) < 3 * np.outer(sd, sd)[off] / np.sqrt(n)))


MU = np.array([0.3, -0.2, 0.0, 0.1])
SIGMA = np.array([0.5, 0.7, 1.0, 0.6])


def test_gaussian_calibration_on_fine_schedule():
    # 14 statistics at 3 sigma each give a ~4% false-alarm rate for any one
    # seed; the seed is fixed rather than redrawn
    sched = NoiseSchedule.linear(2000, 1e-4, 0.01)
    x, _ = ancestral_sample(None, sched, None, 1, n=10_000, denoiser=gaussian_denoiser(sched, MU, SIGMA),
                            data_dim=4, clip=False)
    assert check_moments(x, MU, SIGMA ** 2)


def test_default_schedule_matches_its_discretization_prediction():
    # the 100-step chain has a deterministic variance deficit; the Monte
    # Carlo output must agree with the closed-form recursion, not with sigma^2
    sched = NoiseSchedule.linear()
    m, v = predicted_moments(sched, MU, SIGMA)
    x, _ = ancestral_sample(None, sched, None, 1, n=10_000, denoiser=gaussian_denoiser(sched, MU, SIGMA),
                            data_dim=4, clip=False)
    assert check_moments(x, m, v)
    assert np.all(v < SIGMA ** 2)
