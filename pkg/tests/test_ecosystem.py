import numpy as np
import pytest

from semswarm import kernels
from semswarm.ecosystem import (
    EcosystemWorld,
    MetaRule,
    admit_lifeform,
    apply_meta_rules,
    ecosystem_step,
    extract_meta_rules,
    jacobi_eigh,
    kmeans,
    pca,
    world_state,
)
from semswarm.errors import (
    CapacityExceeded,
    DimensionError,
    InsufficientData,
    TooManyClusters,
)
from semswarm.params import normalize_params, validate_params
from semswarm.semantic import EMBED_DIM
from semswarm.swarm import SwarmWorld, make_rng, step_world

BASE = validate_params([0.08, 0.04, 0.8, 0.8, 0.8, 0.004])[0]


def embedding(index, sign=1.0):
    v = np.zeros(EMBED_DIM)
    v[index] = sign
    return v


def test_admit_two_lifeforms():
    world = EcosystemWorld(capacity=5000, seed=1)
    a = admit_lifeform(world, BASE, embedding(0), "alice", 500)
    b = admit_lifeform(world, BASE, embedding(1), "bob", 500)
    assert world.n_agents == 1000
    assert len(world.lifeforms) == 2
    assert a.id != b.id
    assert set(np.unique(world.species)) == {0, 1}


def test_admit_capacity_exceeded():
    world = EcosystemWorld(capacity=1000, seed=1)
    admit_lifeform(world, BASE, embedding(0), "alice", 600)
    with pytest.raises(CapacityExceeded):
        admit_lifeform(world, BASE, embedding(1), "bob", 600)


def test_admit_deterministic_placement():
    a = EcosystemWorld(capacity=1000, seed=9)
    b = EcosystemWorld(capacity=1000, seed=9)
    admit_lifeform(a, BASE, embedding(0), "x", 100)
    admit_lifeform(b, BASE, embedding(0), "x", 100)
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.velocities, b.velocities)


def test_single_lifeform_matches_swarm_core():
    world = EcosystemWorld(capacity=1000, seed=4)
    admit_lifeform(world, BASE, embedding(0), "solo", 200)
    # mirror the world into a plain swarm and advance both with the same
    # noise stream
    twin = SwarmWorld(world.positions.copy(), world.velocities.copy(),
                      make_rng(0))
    twin.rng = np.random.Generator(np.random.PCG64(world.rng.bit_generator.state["state"]["state"]))
    twin.rng.bit_generator.state = world.rng.bit_generator.state
    ecosystem_step(world)
    step_world(twin, BASE)
    assert np.array_equal(world.positions, twin.positions)
    assert np.array_equal(world.velocities, twin.velocities)


def test_merge_mode_for_aligned_species():
    world = EcosystemWorld(capacity=1000, seed=5)
    admit_lifeform(world, BASE, embedding(0), "a", 50)
    admit_lifeform(world, BASE, embedding(0), "b", 50)
    from semswarm.ecosystem import _affinity_modes

    modes = _affinity_modes(world.lifeforms)
    assert modes[0, 1] == modes[1, 0] == kernels.PAIR_MERGE


def test_repel_mode_for_orthogonal_species():
    world = EcosystemWorld(capacity=1000, seed=5)
    admit_lifeform(world, BASE, embedding(0), "a", 50)
    admit_lifeform(world, BASE, embedding(1), "b", 50)
    from semswarm.ecosystem import _affinity_modes

    modes = _affinity_modes(world.lifeforms)
    assert modes[0, 1] == kernels.PAIR_REPEL


def test_intermediate_affinity_is_ignored():
    world = EcosystemWorld(capacity=1000, seed=5)
    mixed = embedding(0) * np.sqrt(0.5) + embedding(1) * np.sqrt(0.5)
    admit_lifeform(world, BASE, embedding(0), "a", 50)
    admit_lifeform(world, BASE, mixed, "b", 50)
    from semswarm.ecosystem import _affinity_modes

    modes = _affinity_modes(world.lifeforms)
    assert modes[0, 1] == kernels.PAIR_IGNORE


def test_repel_triples_cross_species_separation():
    # two agents close together; separation weight kept tiny so the push
    # stays below the speed clamp and the mode factors are observable
    raw = [0.2, 0.1, 0.0, 0.0, 1e-4, 0.0]

    def build(e2, n_species=2):
        world = EcosystemWorld(capacity=10, seed=6)
        params = validate_params(raw)[0]
        if n_species == 2:
            admit_lifeform(world, params, embedding(0), "a", 1)
            admit_lifeform(world, params, e2, "b", 1)
        else:
            admit_lifeform(world, params, embedding(0), "a", 2)
        world.positions = np.array([[0.50, 0.5], [0.56, 0.5]])
        world.velocities = np.zeros((2, 2))
        return world

    same = build(embedding(0))     # affinity 1 -> merge: no cross separation
    opposed = build(embedding(1))  # affinity 0 -> repel: tripled separation
    single = build(None, n_species=1)  # same species: plain separation
    ecosystem_step(same)
    ecosystem_step(opposed)
    ecosystem_step(single)
    assert same.velocities[0, 0] == 0.0
    push = opposed.velocities[0, 0]
    assert push < 0.0  # pushed away along -x
    base_push = single.velocities[0, 0]
    assert abs(base_push) < validate_params(raw)[0].max_speed  # unclamped
    assert push == pytest.approx(3.0 * base_push, rel=1e-12)


def test_species_ids_conserved_outside_hybrid_events():
    world = EcosystemWorld(capacity=2000, seed=7)
    admit_lifeform(world, BASE, embedding(0), "a", 300)
    admit_lifeform(world, BASE, embedding(5), "b", 300)
    before = world.species.copy()
    for _ in range(50):
        ecosystem_step(world)
    assert np.array_equal(world.species[:600], before)


def test_hybridization_spawns_blend():
    world = EcosystemWorld(capacity=2000, seed=11)
    a = admit_lifeform(world, BASE, embedding(0), "a", 100)
    b = admit_lifeform(world, BASE, embedding(0), "b", 100)
    # drop both flocks onto the same spot so centroids coincide
    world.positions[:100] = (np.full((100, 2), 0.5)
                             + world.rng.normal(0, 0.01, (100, 2))) % 1.0
    world.positions[100:] = (np.full((100, 2), 0.5)
                             + world.rng.normal(0, 0.01, (100, 2))) % 1.0
    spawned = False
    for _ in range(10):  # 10 epochs of chances at p=0.25
        world.step_count = 599
        ecosystem_step(world)
        if len(world.lifeforms) > 2:
            spawned = True
            break
    assert spawned
    child = world.lifeforms[-1]
    assert child.owner == f"hybrid:{a.id}+{b.id}"
    low = np.minimum(a.params.as_array(), b.params.as_array())
    high = np.maximum(a.params.as_array(), b.params.as_array())
    assert np.all(child.params.as_array() >= low - 1e-9)
    assert np.all(child.params.as_array() <= high + 1e-9)


# --- pca ----------------------------------------------------------------------

def test_pca_collinear_data():
    direction = np.array([1.0, 1.0, 0, 0, 0, 0]) / np.sqrt(2)
    data = np.outer(np.linspace(-1, 1, 9), direction)
    components, ratios = pca(data, 2)
    assert ratios[0] == pytest.approx(1.0)
    assert ratios[1] == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(np.abs(components[0]), direction, atol=1e-10)
    assert components[0][np.argmax(np.abs(components[0]))] > 0


def test_pca_full_rank_ratios_sum_to_one():
    rng = np.random.default_rng(0)
    data = rng.standard_normal((50, 6))
    _, ratios = pca(data, 6)
    assert float(ratios.sum()) == pytest.approx(1.0, abs=1e-9)


def test_pca_orthonormal_components():
    rng = np.random.default_rng(1)
    components, _ = pca(rng.standard_normal((40, 6)), 6)
    gram = components @ components.T
    assert np.allclose(gram, np.eye(6), atol=1e-9)


def test_pca_matches_dense_eigensolver():
    rng = np.random.default_rng(2)
    for _ in range(100):
        data = rng.standard_normal((12, 6))
        cov = np.cov(data, rowvar=False)
        eigvals, _ = jacobi_eigh(cov)
        reference = np.sort(np.linalg.eigvalsh(cov))[::-1]
        assert np.allclose(eigvals, reference, atol=1e-8)
        components, _ = pca(data, 6)
        _, ref_vectors = np.linalg.eigh(cov)
        for i in range(6):
            ref = ref_vectors[:, ::-1][:, i]
            overlap = abs(float(components[i] @ ref))
            assert overlap == pytest.approx(1.0, abs=1e-7)


def test_pca_input_validation():
    with pytest.raises(DimensionError):
        pca(np.zeros((5, 3)), 4)
    with pytest.raises(InsufficientData):
        pca(np.zeros((1, 3)), 1)


# --- kmeans --------------------------------------------------------------------

def test_kmeans_k_equals_rows():
    rng = np.random.default_rng(3)
    data = rng.random((7, 4))
    assignments, centroids, inertia = kmeans(data, 7, seed=1)
    assert inertia == pytest.approx(0.0, abs=1e-18)
    assert sorted(assignments.tolist()) == list(range(7))


def test_kmeans_single_cluster_is_mean():
    rng = np.random.default_rng(4)
    data = rng.random((30, 5))
    _, centroids, _ = kmeans(data, 1, seed=1)
    assert np.allclose(centroids[0], data.mean(axis=0), atol=1e-12)


def test_kmeans_too_many_clusters():
    with pytest.raises(TooManyClusters):
        kmeans(np.zeros((3, 2)), 4, seed=0)


def test_kmeans_separates_two_blobs():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        a = rng.normal(0.25, 0.01, (25, 2))
        b = rng.normal(0.75, 0.01, (25, 2))
        assignments, _, _ = kmeans(np.vstack([a, b]), 2, seed=seed)
        label = assignments[0]
        assert np.all(assignments[:25] == label)
        assert np.all(assignments[25:] == 1 - label)


def test_kmeans_inertia_non_increasing():
    rng = np.random.default_rng(5)
    data = rng.random((60, 6))
    last = None
    for k in (1, 2, 4, 8):
        _, _, inertia = kmeans(data, k, seed=3)
        if last is not None:
            assert inertia <= last + 1e-9
        last = inertia


# --- meta rules -----------------------------------------------------------------

def lifeform_with(params_raw, index=0):
    world = EcosystemWorld(capacity=100, seed=index)
    return admit_lifeform(world, validate_params(params_raw)[0],
                          embedding(index % 60), f"o{index}", 1)


def test_meta_rules_need_three_lifeforms():
    forms = [lifeform_with([0.1, 0.05, 1, 1, 1, 0.01], i) for i in range(2)]
    assert extract_meta_rules(forms) == []


def test_meta_rules_degenerate_population():
    forms = [lifeform_with([0.1, 0.05, 1, 1, 1, 0.01], i) for i in range(6)]
    assert extract_meta_rules(forms) == []


def test_meta_rules_single_varying_dimension():
    forms = []
    for i in range(12):
        raw = [0.1, 0.05, 1.0, 0.1 + 0.15 * i, 1.0, 0.01]  # cohesion sweep
        forms.append(lifeform_with(raw, i))
    rules = extract_meta_rules(forms)
    assert len(rules) == 1
    axis = np.zeros(6)
    axis[3] = 1.0  # cohesion dimension
    assert np.allclose(np.abs(rules[0].component), axis, atol=1e-8)
    assert rules[0].component[3] > 0
    assert rules[0].explained_variance_ratio == pytest.approx(1.0, abs=1e-9)


def test_apply_meta_rules_empty_is_identity():
    world = EcosystemWorld(capacity=100, seed=0)
    admit_lifeform(world, BASE, embedding(0), "a", 10)
    before = world.lifeforms[0].params
    apply_meta_rules(world, [])
    assert world.lifeforms[0].params == before


def test_apply_meta_rules_at_mean_is_identity():
    world = EcosystemWorld(capacity=100, seed=0)
    for _ in range(3):
        admit_lifeform(world, BASE, embedding(0), "a", 1)
    rule = MetaRule(np.eye(6)[3], 1.0, 0.5, 0)
    apply_meta_rules(world, [rule])
    for lf in world.lifeforms:
        assert np.allclose(lf.params.as_array(), BASE.as_array(), atol=1e-12)


def test_apply_meta_rules_arithmetic():
    # +0.4 normalized deviation along the rule, strength 0.5 -> moves 0.02
    world = EcosystemWorld(capacity=100, seed=0)
    mid = validate_params([0.25, 0.0505, 1.0, 1.0, 1.0, 0.025])[0]
    deviant_raw = mid.as_array().copy()
    deviant_raw[3] += 0.4 * 2.0  # +0.4 of the cohesion range
    world.lifeforms = []
    admit_lifeform(world, validate_params(deviant_raw)[0], embedding(0), "d", 1)
    admit_lifeform(world, mid, embedding(0), "m1", 1)
    admit_lifeform(world, mid, embedding(0), "m2", 1)
    admit_lifeform(world, mid, embedding(0), "m3", 1)
    # population mean sits +0.1 above mid in normalized cohesion
    rule = MetaRule(np.eye(6)[3], 1.0, 0.5, 0)
    before = normalize_params(world.lifeforms[0].params)[3]
    apply_meta_rules(world, [rule])
    after = normalize_params(world.lifeforms[0].params)[3]
    assert before - after == pytest.approx(0.3 * 0.5 * 0.1, abs=1e-9)


def test_apply_meta_rules_is_contraction_within_bounds():
    rng = np.random.default_rng(9)
    world = EcosystemWorld(capacity=100, seed=0)
    for i in range(8):
        raw = rng.uniform([0.01, 0.002, 0, 0, 0, 0], [0.5, 0.1, 2, 2, 2, 0.05])
        admit_lifeform(world, validate_params(raw)[0], embedding(0), f"l{i}", 1)
    rules = extract_meta_rules(world.lifeforms)
    normalized = np.stack([normalize_params(l.params) for l in world.lifeforms])
    mean = normalized.mean(axis=0)
    distances = np.linalg.norm(normalized - mean, axis=1)
    apply_meta_rules(world, rules)
    after = np.stack([normalize_params(l.params) for l in world.lifeforms])
    for i, lf in enumerate(world.lifeforms):
        _, flags = validate_params(lf.params.as_array())
        assert not any(flags)
        assert np.linalg.norm(after[i] - mean) <= distances[i] + 1e-12


def test_world_state_snapshot():
    world = EcosystemWorld(capacity=100, seed=0)
    admit_lifeform(world, BASE, embedding(0), "a", 10)
    state = world_state(world)
    assert state["n_agents"] == 10
    assert len(state["lifeforms"]) == 1
    assert state["lifeforms"][0]["owner"] == "a"


def test_render_world_png_decodes():
    import io

    from PIL import Image

    from semswarm.ecosystem import render_world_png

    world = EcosystemWorld(capacity=1000, seed=2)
    admit_lifeform(world, BASE, embedding(0), "a", 50)
    admit_lifeform(world, BASE, embedding(1), "b", 50)
    png = render_world_png(world, size=64)
    image = Image.open(io.BytesIO(png)).convert("RGB")
    assert image.size == (64, 64)
    assert np.asarray(image).max() > 0
