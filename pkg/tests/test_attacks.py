import numpy as np
import pytest

from dmatlab.attacks import (
    AttackSpec,
    CORRUPTION_KINDS,
    apply_corruption,
    corruption_attack,
    craft,
    default_suite,
    fgsm,
    get_basis,
    load_suite,
    lp_pgd,
    mia,
    om_attack,
    om_fgsm,
    pgd,
    save_suite,
    worst_case_eval,
)
from dmatlab.autodiff import Graph
from dmatlab.models import (
    Architecture,
    classifier_forward,
    default_classifier_arch,
    generator_forward,
    init_params,
    predict,
)

EPS = 4.0 / 255.0
ETA = 0.02


def zero_classifier():
    f = init_params(default_classifier_arch(), 0)
    for w in f.weights:
        w[...] = 0.0
    return f


def pgd_spec(**kw):
    base = dict(name="pgd", space="image", norm="linf", budget=EPS, steps=50,
                random_start=True, seed=3)
    base.update(kw)
    return AttackSpec(**base)


def test_spec_validation():
    with pytest.raises(ValueError):
        AttackSpec(name="x", space="image", budget=0.0)
    with pytest.raises(ValueError):
        AttackSpec(name="x", space="image", steps=0)
    with pytest.raises(ValueError):
        AttackSpec(name="x", space="warp")
    with pytest.raises(ValueError):
        AttackSpec(name="x", space="corruption", corruption_kind="rain")


def test_spec_alpha_heuristic():
    assert pgd_spec(steps=50).alpha == pytest.approx(2.5 * EPS / 50)
    assert pgd_spec(steps=1).alpha == EPS
    assert pgd_spec(step_size=0.5).alpha == 0.5


def test_fgsm_zero_gradient_is_identity(small_data):
    _, _, test_set = small_data
    f = zero_classifier()
    x = test_set.x_on[:16]
    assert np.array_equal(fgsm(f, x, test_set.y[:16], EPS), x)


def test_fgsm_full_budget_on_interior_point(trained_small, rng):
    f = trained_small["normal"]
    # interior image with margin > eps, nonzero gradient everywhere
    for attempt in range(50):
        x = rng.uniform(0.2, 0.8, 256)
        y = 0
        g = Graph()
        xn = g.input("x", (1, 256))
        from dmatlab.models import add_network

        logits, _ = add_network(g, f, xn, bind="const")
        g.mark_output("loss", g.softmax_cross_entropy(logits, np.array([y])))
        from dmatlab.autodiff import eval_with_grad

        _, grads, _ = eval_with_grad(g, {"x": x[None]}, "loss", ["x"])
        if np.all(grads["x"] != 0.0):
            break
    x_adv = fgsm(f, x, y, EPS)
    # exact up to one rounding of x + eps*sign per coordinate
    assert np.abs(x_adv - x).max() == pytest.approx(EPS, abs=5e-16)


def test_pgd_single_step_equals_fgsm(trained_small, small_data):
    _, _, test_set = small_data
    f = trained_small["at"]
    x, y = test_set.x_on[:64], test_set.y[:64]
    spec = pgd_spec(steps=1, step_size=EPS, random_start=False)
    assert np.array_equal(pgd(f, x, y, spec), fgsm(f, x, y, EPS))


def test_pgd_budget_and_pixel_range(trained_small, small_data):
    _, _, test_set = small_data
    f = trained_small["normal"]
    x, y = test_set.x_on[:64], test_set.y[:64]
    x_adv = pgd(f, x, y, pgd_spec())
    assert np.abs(x_adv - x).max() <= EPS + 1e-12
    assert x_adv.min() >= 0.0 and x_adv.max() <= 1.0


def _corner_enumeration_loss(f, x, y, eps):
    """Exact max CE over the L-inf ball corners of a low-dim linear model."""
    d = x.size
    best = -np.inf
    for bits in range(2**d):
        signs = np.array([1.0 if bits >> i & 1 else -1.0 for i in range(d)])
        xa = np.clip(x + eps * signs, 0.0, 1.0)
        z = classifier_forward(f, xa)
        lse = np.log(np.exp(z - z.max()).sum()) + z.max()
        best = max(best, lse - z[y])
    return best


def test_pgd_matches_corner_enumeration_on_linear_models(rng):
    # convex loss over a box peaks at a corner; PGD with restarts finds it
    hits = 0
    trials = 20
    for t in range(trials):
        d = int(rng.integers(2, 4))
        arch = Architecture(input_dim=d, hidden_dims=(), output_dim=3)
        f = init_params(arch, int(rng.integers(1_000_000)))
        for w in f.weights:
            w *= 2.0
        x = rng.uniform(0.3, 0.7, d)
        y = int(rng.integers(0, 3))
        spec = AttackSpec(name="p", space="image", norm="linf", budget=0.1,
                          steps=50, random_start=True, seed=t, restarts=10,
                          keep_best=True)
        x_adv = pgd(f, x, y, spec)
        z = classifier_forward(f, x_adv)
        lse = np.log(np.exp(z - z.max()).sum()) + z.max()
        got = lse - z[y]
        want = _corner_enumeration_loss(f, x, y, 0.1)
        if abs(got - want) < 1e-6:
            hits += 1
    assert hits == trials


def test_mia_zero_momentum_equals_pgd(trained_small, small_data):
    _, _, test_set = small_data
    f = trained_small["at"]
    x, y = test_set.x_on[:64], test_set.y[:64]
    spec = pgd_spec(steps=10)
    mia_spec = pgd_spec(steps=10, momentum_decay=0.0)
    assert np.array_equal(mia(f, x, y, mia_spec), pgd(f, x, y, spec))


def test_mia_zero_gradient_guard(small_data):
    _, _, test_set = small_data
    f = zero_classifier()
    x, y = test_set.x_on[:8], test_set.y[:8]
    spec = pgd_spec(steps=5, momentum_decay=1.0, random_start=False)
    assert np.array_equal(mia(f, x, y, spec), x)


def test_om_attack_zero_gradient_stays_on_start(small_data, generator):
    _, _, test_set = small_data
    f = zero_classifier()
    w, y = test_set.w[:8], test_set.y[:8]
    spec = AttackSpec(name="om", space="latent", norm="linf", budget=ETA,
                      steps=5, random_start=False, seed=0)
    w_adv, x_adv = om_attack(f, generator, w, y, spec)
    assert np.array_equal(w_adv, w)
    assert np.array_equal(x_adv, generator_forward(generator, w))


def test_om_attack_budget_and_manifold_closure(trained_small, small_data, generator):
    _, _, test_set = small_data
    f = trained_small["at"]
    w, y = test_set.w[:64], test_set.y[:64]
    spec = AttackSpec(name="om", space="latent", norm="linf", budget=ETA,
                      steps=20, random_start=True, seed=5)
    w_adv, x_adv = om_attack(f, generator, w, y, spec)
    assert np.abs(w_adv - w).max() <= ETA + 1e-12
    # exactly on-manifold: the output is the generator's image of w_adv
    assert np.array_equal(x_adv, generator_forward(generator, w_adv))


def test_om_single_step_equals_latent_fgsm(trained_small, small_data, generator):
    _, _, test_set = small_data
    f = trained_small["at"]
    w, y = test_set.w[:64], test_set.y[:64]
    spec = AttackSpec(name="om", space="latent", norm="linf", budget=ETA,
                      steps=1, step_size=ETA, random_start=False, seed=0)
    w_a, x_a = om_attack(f, generator, w, y, spec)
    w_b, x_b = om_fgsm(f, generator, w, y, ETA)
    assert np.array_equal(w_a, w_b)
    assert np.array_equal(x_a, x_b)


@pytest.mark.parametrize("norm,budget", [("l2", 0.5), ("l1", 6.0)])
def test_lp_budget_compliance(trained_small, small_data, norm, budget):
    _, _, test_set = small_data
    f = trained_small["normal"]
    x, y = test_set.x_on[:64], test_set.y[:64]
    spec = AttackSpec(name=norm, space="image", norm=norm, budget=budget,
                      steps=20, random_start=True, seed=9)
    x_adv = lp_pgd(f, x, y, spec)
    d = x_adv - x
    n = np.sqrt((d * d).sum(1)) if norm == "l2" else np.abs(d).sum(1)
    assert n.max() <= budget + 1e-12
    assert x_adv.min() >= 0.0 and x_adv.max() <= 1.0


def test_l2_unconstrained_budget_floors_accuracy(trained_small, small_data):
    # budget on the image-diameter scale: nothing survives
    _, _, test_set = small_data
    f = trained_small["normal"]
    spec = AttackSpec(name="l2", space="image", norm="l2", budget=16.0,
                      steps=50, random_start=True, seed=9)
    x_adv = lp_pgd(f, test_set.x_on, test_set.y, spec)
    assert (predict(f, x_adv) == test_set.y).mean() <= 0.05


def test_l1_attack_leaves_most_pixels_untouched(trained_small, small_data):
    _, _, test_set = small_data
    f = trained_small["normal"]
    spec = AttackSpec(name="l1", space="image", norm="l1", budget=6.0,
                      steps=50, random_start=False, seed=9)
    x_adv = lp_pgd(f, test_set.x_on[:64], test_set.y[:64], spec)
    untouched = (x_adv == test_set.x_on[:64]).mean(axis=1)
    assert untouched.min() >= 0.5


def test_monotone_attack_strength(trained_small, small_data):
    from dmatlab.attacks import _ImageLoss

    _, _, test_set = small_data
    f = trained_small["at"]
    x, y = test_set.x_on, test_set.y
    loss = _ImageLoss(f, x.shape[0], x.shape[1], y)
    out = {}
    for steps in (5, 50):
        spec = pgd_spec(steps=steps, random_start=False)
        out[steps] = np.median(loss.per_sample(pgd(f, x, y, spec)))
    assert out[50] >= out[5]


# -- corruptions ---------------------------------------------------------------


@pytest.mark.parametrize("kind", CORRUPTION_KINDS)
def test_basis_columns_unit_norm(kind):
    basis = get_basis(kind, seed=4)
    norms = np.sqrt((basis.basis**2).sum(axis=0))
    assert np.allclose(norms, 1.0, atol=1e-12)


@pytest.mark.parametrize("kind", CORRUPTION_KINDS)
def test_zero_parameters_identity_or_smoothing(kind, small_data):
    from dmatlab.autodiff import _conv2d_same

    _, _, test_set = small_data
    x = test_set.x_on[:8]
    basis = get_basis(kind, seed=4)
    theta = np.zeros((8, basis.m))
    out = apply_corruption(basis, x, theta)
    if kind == "elastic":
        expected = np.clip(
            _conv2d_same(x.reshape(-1, 16, 16), basis.smoothing_kernel).reshape(8, 256),
            0.0, 1.0,
        )
        assert np.array_equal(out, expected)
    else:
        assert np.array_equal(out, x)


@pytest.mark.parametrize("kind", CORRUPTION_KINDS)
def test_corruption_budget_compliance(kind, trained_small, small_data):
    _, _, test_set = small_data
    f = trained_small["normal"]
    spec = AttackSpec(name=kind, space="corruption", corruption_kind=kind,
                      budget=0.8, steps=10, random_start=True, seed=6)
    x_adv, theta = corruption_attack(f, test_set.x_on[:32], test_set.y[:32],
                                     spec, return_params=True)
    assert np.abs(theta).max() <= 0.8 + 1e-12
    assert x_adv.min() >= 0.0 and x_adv.max() <= 1.0
    basis = get_basis(kind, spec.seed)
    assert np.allclose(x_adv, apply_corruption(basis, test_set.x_on[:32], theta),
                       atol=1e-9)


def test_corruption_graph_matches_reference(small_data):
    # graph evaluation of C(x, theta) agrees with the plain numpy reference
    from dmatlab.attacks import _CorruptionLoss

    _, _, test_set = small_data
    rng = np.random.default_rng(0)
    f = zero_classifier()
    for kind in CORRUPTION_KINDS:
        basis = get_basis(kind, seed=4)
        loss = _CorruptionLoss(f, basis, test_set.x_on[:4], test_set.y[:4])
        theta = rng.uniform(-0.5, 0.5, (4, basis.m))
        assert np.allclose(
            loss.image(theta),
            apply_corruption(basis, test_set.x_on[:4], theta),
            atol=1e-12,
        )


def test_unknown_corruption_kind_errors():
    with pytest.raises(ValueError, match="unknown corruption kind"):
        get_basis("rain", 0)


# -- worst case and suites ---------------------------------------------------------


def test_worst_case_single_attack_equals_accuracy(trained_small, small_data, generator):
    _, _, test_set = small_data
    f = trained_small["at"]
    sub = test_set.subset(64)
    spec = pgd_spec(steps=10)
    ok = worst_case_eval(f, sub, [spec], gen=generator)
    x_adv = pgd(f, sub.x_on, sub.y, spec)
    assert ok.mean() == (predict(f, x_adv) == sub.y).mean()


def test_worst_case_bounded_by_min_accuracy(trained_small, small_data, generator):
    _, _, test_set = small_data
    f = trained_small["at"]
    sub = test_set.subset(64)
    attacks = [
        pgd_spec(steps=1, step_size=EPS, random_start=False, name="fgsm"),
        pgd_spec(steps=10, name="pgd"),
        pgd_spec(steps=10, momentum_decay=1.0, name="mia"),
    ]
    ok = worst_case_eval(f, sub, attacks, gen=generator)
    accs = []
    for spec in attacks:
        x_adv, _ = craft(f, spec, x=sub.x_on, y=sub.y, w=sub.w, gen=generator)
        accs.append((predict(f, x_adv) == sub.y).mean())
    assert ok.mean() <= min(accs)


def test_worst_case_requires_attacks(trained_small, small_data):
    _, _, test_set = small_data
    with pytest.raises(ValueError):
        worst_case_eval(trained_small["at"], test_set.subset(4), [])


def test_craft_latent_without_coordinates_raises(trained_small, small_data):
    _, _, test_set = small_data
    spec = AttackSpec(name="om", space="latent", norm="linf", budget=ETA,
                      steps=2, seed=0)
    with pytest.raises(ValueError, match="latent"):
        craft(trained_small["at"], spec, x=test_set.x_on[:4], y=test_set.y[:4],
              w=None, gen=None)


def test_suite_roundtrip_lossless(tmp_path):
    specs, worst = default_suite(seed=3)
    path = tmp_path / "suite.json"
    save_suite(path, specs, worst)
    specs2, worst2 = load_suite(path)
    assert worst2 == worst
    assert [s.to_dict() for s in specs2] == [s.to_dict() for s in specs]


def test_suite_bad_format(tmp_path):
    path = tmp_path / "s.json"
    path.write_text('{"format": "nope"}')
    from dmatlab.models import FileFormatError

    with pytest.raises(FileFormatError):
        load_suite(path)
