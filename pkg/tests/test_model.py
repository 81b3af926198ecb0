import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splinemix.errors import InvalidInputError
from splinemix.growth import ClassParams, Frame
from splinemix.model import (
    GatingParams,
    MixtureParams,
    MixtureSpec,
    ModelKind,
    ParamLayout,
    gating_probabilities,
    parameter_count,
)


def make_spec(kind, k=2, c_g=2, c_e=2):
    gating = tuple(f"g{i}" for i in range(c_g)) if ModelKind(kind).has_gating_covariates else ()
    expert = tuple(f"e{i}" for i in range(c_e)) if ModelKind(kind).has_expert_covariates else ()
    return MixtureSpec(kind=kind, n_classes=k, gating_covariates=gating, expert_covariates=expert)


def random_mixture_params(rng, spec):
    c_e = spec.n_expert if spec.kind.has_expert_covariates else 0
    classes = []
    for _ in range(spec.n_classes):
        a = rng.normal(size=(3, 3))
        if c_e:
            b = rng.normal(size=(c_e, c_e))
            phi = b @ b.T + 0.3 * np.eye(c_e)
        else:
            phi = np.zeros((0, 0))
        classes.append(
            ClassParams(
                beta_e0=rng.normal(scale=5, size=3),
                psi=a @ a.T + 0.4 * np.eye(3),
                gamma=rng.uniform(1.5, 7.5),
                theta_eps=rng.uniform(0.3, 4.0),
                b_e=rng.normal(size=(3, c_e)),
                mu_xe=rng.normal(size=c_e),
                phi=phi,
                frame=spec.frame,
            )
        )
    c_g = spec.n_gating if spec.kind.has_gating_covariates else 0
    gating = GatingParams(
        intercepts=rng.normal(size=spec.n_classes - 1),
        coefficients=rng.normal(size=(spec.n_classes - 1, c_g)),
    )
    return MixtureParams(classes=tuple(classes), gating=gating)


class TestSpecValidation:
    def test_role_exclusivity(self):
        with pytest.raises(InvalidInputError):
            MixtureSpec(
                kind=ModelKind.FULL,
                n_classes=2,
                gating_covariates=("a",),
                expert_covariates=("a",),
            )

    def test_fmm_forbids_covariates(self):
        with pytest.raises(InvalidInputError):
            MixtureSpec(kind=ModelKind.FMM, n_classes=2, gating_covariates=("a",))
        with pytest.raises(InvalidInputError):
            MixtureSpec(kind=ModelKind.FMM, n_classes=2, expert_covariates=("a",))

    def test_cp_forbids_expert(self):
        with pytest.raises(InvalidInputError):
            MixtureSpec(
                kind=ModelKind.CP, n_classes=2, gating_covariates=("a",), expert_covariates=("b",)
            )

    def test_gp_forbids_gating(self):
        with pytest.raises(InvalidInputError):
            MixtureSpec(
                kind=ModelKind.GP, n_classes=2, gating_covariates=("a",), expert_covariates=("b",)
            )

    def test_k_must_be_positive(self):
        with pytest.raises(InvalidInputError):
            MixtureSpec(kind=ModelKind.FMM, n_classes=0)


class TestGatingProbabilities:
    def test_symmetric_two_class(self):
        gp = GatingParams(intercepts=[0.0], coefficients=np.zeros((1, 0)))
        assert np.allclose(gating_probabilities(np.zeros(0), gp), [0.5, 0.5], atol=1e-15)

    def test_unbalanced_intercept(self):
        gp = GatingParams(intercepts=[0.775], coefficients=np.zeros((1, 0)))
        probs = gating_probabilities(np.zeros(0), gp)
        want1 = 1.0 / (1.0 + np.exp(0.775))
        assert probs[0] == pytest.approx(want1, abs=1e-12)
        assert probs[1] == pytest.approx(1.0 - want1, abs=1e-12)
        # quoted to four figures as (0.3153, 0.6847)
        assert probs[0] == pytest.approx(0.3153, abs=2e-4)
        assert probs[1] == pytest.approx(0.6847, abs=2e-4)

    def test_three_class_uniform(self):
        gp = GatingParams(intercepts=[0.0, 0.0], coefficients=np.zeros((2, 0)))
        assert np.allclose(gating_probabilities(np.zeros(0), gp), np.ones(3) / 3, atol=1e-15)

    def test_rejects_non_finite_covariates(self):
        gp = GatingParams(intercepts=[0.0], coefficients=[[1.0]])
        with pytest.raises(InvalidInputError):
            gating_probabilities([np.nan], gp)

    def test_depends_only_on_predictor_differences(self):
        # with the reference predictor identically zero, probabilities are a
        # function of the K-1 linear predictors alone
        rng = np.random.default_rng(5)
        x = rng.normal(size=4)
        icpt = rng.normal(size=2)
        coef = rng.normal(size=(2, 4))
        gp = GatingParams(intercepts=icpt, coefficients=coef)
        probs = gating_probabilities(x, gp)
        preds = np.concatenate([[0.0], icpt + coef @ x])
        want = np.exp(preds) / np.exp(preds).sum()
        assert np.allclose(probs, want, atol=1e-12)


@settings(max_examples=500, deadline=None)
@given(data=st.data())
def test_gating_simplex_property(data):
    k = data.draw(st.integers(2, 4))
    c = data.draw(st.integers(0, 3))
    rng = np.random.default_rng(data.draw(st.integers(0, 2**31)))
    gp = GatingParams(
        intercepts=rng.normal(scale=3, size=k - 1),
        coefficients=rng.normal(scale=3, size=(k - 1, c)),
    )
    probs = gating_probabilities(rng.normal(size=c), gp)
    assert np.all(probs >= 0) and np.all(probs <= 1)
    assert abs(probs.sum() - 1.0) < 1e-12


class TestParameterCount:
    def test_single_class_fmm(self):
        assert parameter_count(make_spec(ModelKind.FMM, k=1)) == 11

    def test_two_class_fmm(self):
        assert parameter_count(make_spec(ModelKind.FMM, k=2)) == 23

    def test_full_two_class(self):
        assert parameter_count(make_spec(ModelKind.FULL, k=2, c_g=2, c_e=2)) == 47

    def test_additivity_fmm_to_full(self):
        fmm = parameter_count(make_spec(ModelKind.FMM, k=2))
        cp = parameter_count(make_spec(ModelKind.CP, k=2, c_g=2))
        gp = parameter_count(make_spec(ModelKind.GP, k=2, c_e=2))
        full = parameter_count(make_spec(ModelKind.FULL, k=2, c_g=2, c_e=2))
        # gating covariates add (K-1) c_g terms; expert covariates add the
        # per-class path/moment blocks; both increments stack
        assert cp - fmm == 1 * 2
        gp_increment = gp - fmm
        assert full == fmm + (cp - fmm) + gp_increment


class TestPacking:
    @pytest.mark.parametrize("kind", list(ModelKind))
    def test_round_trip(self, kind):
        spec = make_spec(kind, k=2)
        layout = ParamLayout(spec, knot_bounds=(1.0, 8.0))
        rng = np.random.default_rng(3)
        params = random_mixture_params(rng, spec)
        vec = layout.pack(params)
        back = layout.pack(layout.unpack(vec))
        assert np.allclose(vec, back, atol=1e-14)

    def test_layout_size_matches_parameter_count(self):
        for kind in ModelKind:
            spec = make_spec(kind, k=2)
            layout = ParamLayout(spec, knot_bounds=(1.0, 8.0))
            assert layout.size == parameter_count(spec)

    def test_full_layout_length_47(self):
        spec = make_spec(ModelKind.FULL, k=2, c_g=2, c_e=2)
        assert ParamLayout(spec, knot_bounds=(1.0, 8.0)).size == 47

    def test_zero_vector_convention(self):
        spec = make_spec(ModelKind.FULL, k=2, c_g=2, c_e=2)
        layout = ParamLayout(spec, knot_bounds=(1.0, 8.0))
        params = layout.unpack(np.zeros(layout.size))
        for cp in params.classes:
            assert np.array_equal(cp.beta_e0, np.zeros(3))
            assert np.allclose(cp.psi, np.eye(3))
            assert np.allclose(cp.phi, np.eye(2))
            assert cp.gamma == pytest.approx(4.5)  # midpoint of the bounds
            assert cp.theta_eps == pytest.approx(1.0)
            assert np.array_equal(cp.b_e, np.zeros((3, 2)))
        assert np.allclose(params.mixing_proportions(), [0.5, 0.5])

    def test_any_vector_is_valid(self):
        spec = make_spec(ModelKind.FULL, k=2, c_g=2, c_e=2)
        layout = ParamLayout(spec, knot_bounds=(1.0, 8.0))
        rng = np.random.default_rng(11)
        for _ in range(50):
            params = layout.unpack(rng.normal(scale=2, size=layout.size))
            for cp in params.classes:
                assert np.linalg.eigvalsh(cp.psi).min() >= -1e-9
                assert cp.theta_eps > 0
                assert 1.0 < cp.gamma < 8.0

    def test_wrong_length_rejected(self):
        spec = make_spec(ModelKind.FMM, k=1)
        layout = ParamLayout(spec, knot_bounds=(1.0, 8.0))
        with pytest.raises(InvalidInputError):
            layout.unpack(np.zeros(layout.size + 1))


class TestRelabel:
    def test_relabel_preserves_probabilities(self):
        rng = np.random.default_rng(13)
        spec = make_spec(ModelKind.FULL, k=3, c_g=2, c_e=2)
        params = random_mixture_params(rng, spec)
        x = rng.normal(size=(20, 2))
        probs = gating_probabilities(x, params.gating)
        new = params.relabel([2, 0, 1])
        probs_new = gating_probabilities(x, new.gating)
        assert np.allclose(probs_new, probs[:, [2, 0, 1]], atol=1e-12)
