import numpy as np
import pytest

from semswarm.errors import (
    DatasetTooSmall,
    DimensionError,
    EmptyPrompt,
    SingularSystem,
)
from semswarm.params import PARAM_BOUNDS, normalize_params, validate_params
from semswarm.prompt2param import (
    MappingModel,
    PromptParamDataset,
    bundled_dataset,
    encode_prompt,
    train_mapping,
)
from semswarm.semantic import EMBED_DIM, oracle_embed_text


def subspace_embedder(basis):
    """Maps prompt 'p<i>' onto a fixed vector inside span(basis)."""
    def embed(prompt):
        i = int(prompt[1:])
        rng = np.random.default_rng(1000 + i)
        coeffs = rng.standard_normal(basis.shape[0])
        return basis.T @ coeffs
    return embed


def make_subspace_dataset(n=12, d_sub=6, seed=0):
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((EMBED_DIM, d_sub)))
    basis = basis.T  # rows span the subspace
    embed = subspace_embedder(basis)
    # targets are an exact linear map of the embeddings, kept strictly
    # interior so validation never clamps them
    mid = np.array([(lo + hi) / 2 for _, lo, hi, _ in PARAM_BOUNDS])
    ranges = np.array([hi - lo for _, lo, hi, _ in PARAM_BOUNDS])
    mix = rng.uniform(-0.02, 0.02, (d_sub, 6))
    pairs = []
    for i in range(n):
        prompt = f"p{i}"
        target = mid + ranges * (mix.T @ (basis @ embed(prompt)))
        params, flags = validate_params(target)
        assert not any(flags), "helper produced an out-of-bounds target"
        pairs.append((prompt, target))
    return PromptParamDataset.from_pairs(pairs), embed, basis


def test_exact_interpolation_in_subspace_at_lambda_zero():
    dataset, embed, basis = make_subspace_dataset()
    model = train_mapping(dataset, embed, ridge_lambda=0.0)
    for prompt, target in dataset.entries:
        prediction = model.predict(embed(prompt))
        assert np.allclose(prediction, target.as_array(), atol=1e-8)

    # independent oracle: solve the 6x6 normal equations in subspace coords
    X = np.stack([embed(p) for p, _ in dataset.entries]) @ basis.T
    Y = np.stack([t.as_array() for _, t in dataset.entries])
    Xc = X - X.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    w_sub = np.linalg.solve(Xc.T @ Xc, Xc.T @ Yc)
    b_sub = Y.mean(axis=0) - w_sub.T @ X.mean(axis=0)
    for prompt, target in dataset.entries:
        oracle = w_sub.T @ (embed(prompt) @ basis.T) + b_sub
        assert np.allclose(model.predict(embed(prompt)), oracle, atol=1e-8)


def test_huge_lambda_collapses_to_dataset_mean():
    dataset, embed, _ = make_subspace_dataset()
    model = train_mapping(dataset, embed, ridge_lambda=1e9)
    assert np.all(np.abs(model.weights) < 1e-6)
    mean = np.mean([t.as_array() for _, t in dataset.entries], axis=0)
    assert np.allclose(model.predict(embed("p0")), mean, atol=1e-6)


def test_wrong_embedding_dimension():
    dataset, _, _ = make_subspace_dataset()
    with pytest.raises(DimensionError):
        train_mapping(dataset, lambda p: np.ones(128), 0.1)


def test_dataset_too_small():
    dataset, embed, _ = make_subspace_dataset(n=9)
    with pytest.raises(DatasetTooSmall):
        train_mapping(dataset, embed, 0.1)


def test_singular_when_all_prompts_embed_identically():
    pairs = [(f"p{i}", [0.1, 0.05, 1.0, 1.0, 1.0, 0.01]) for i in range(12)]
    dataset = PromptParamDataset.from_pairs(pairs)
    constant = np.zeros(EMBED_DIM)
    constant[0] = 1.0
    with pytest.raises(SingularSystem):
        train_mapping(dataset, lambda p: constant, 0.0)


def test_training_beats_zero_weight_model():
    dataset, embed, _ = make_subspace_dataset()
    model = train_mapping(dataset, embed, ridge_lambda=0.1)
    Y = np.stack([t.as_array() for _, t in dataset.entries])
    zero_model_loss = float(np.mean((Y - Y.mean(axis=0)) ** 2))
    assert model.training_loss < zero_model_loss


def test_encode_prompt_deterministic_and_valid(mapping):
    a = encode_prompt(mapping, "gather like magnets", oracle_embed_text)
    b = encode_prompt(mapping, "gather like magnets", oracle_embed_text)
    assert a == b
    validated, flags = validate_params(a.initial_params.as_array())
    assert validated == a.initial_params
    assert not any(flags)  # clamping is idempotent


def test_encode_empty_prompt(mapping):
    with pytest.raises(EmptyPrompt):
        encode_prompt(mapping, "  ", oracle_embed_text)


def test_prediction_linear_before_clamping():
    rng = np.random.default_rng(8)
    model = MappingModel(
        weights=rng.standard_normal((EMBED_DIM, 6)) * 0.01,
        intercept=np.zeros(6),
        ridge_lambda=0.0,
        training_loss=0.0,
    )
    e = rng.standard_normal(EMBED_DIM)
    assert np.allclose(model.predict(2.5 * e), 2.5 * model.predict(e))


def test_bundled_dataset_predictions_near_targets(mapping):
    # derived tolerance computed with the oracle text embedder
    dataset = bundled_dataset()
    assert len(dataset) >= 24
    for prompt, target in dataset.entries:
        encoding = encode_prompt(mapping, prompt, oracle_embed_text)
        rms = np.sqrt(np.mean(
            (normalize_params(encoding.initial_params)
             - normalize_params(target)) ** 2
        ))
        assert rms < 0.15, f"{prompt!r} off by {rms:.3f}"


def test_bundled_prior_equals_initial(mapping):
    encoding = encode_prompt(mapping, "cluster", oracle_embed_text)
    assert encoding.initial_params == encoding.prior_params
