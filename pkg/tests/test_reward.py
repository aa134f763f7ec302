import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import fd_rel_error
from motionft.reward import DualEncoder, EncoderConfig, reward, reward_margin, train_contrastive
from motionft.synthworld import ALL_SPECS, PAD_ID, VOCAB, make_records, spec_tokens, stack_frames, stack_tokens

SMALL = EncoderConfig(width=16, embed=8, tok_dim=8)


def _tokens(n, rng):
    tok = np.full((n, 12), PAD_ID)
    tok[:, :7] = rng.integers(2, len(VOCAB), size=(n, 7))
    return tok


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), scale=st.floats(1e-3, 1e3))
def test_embeddings_unit_norm_and_reward_bounded(seed, scale):
    rng = np.random.default_rng(seed)
    enc = DualEncoder.create(SMALL, seed=seed % 7)
    x = scale * rng.normal(size=(5, 32, 6))
    tok = _tokens(5, rng)
    um, ut = enc.encode_motion(x), enc.encode_text(tok)
    np.testing.assert_allclose(np.linalg.norm(um, axis=1), 1.0, atol=1e-10)
    np.testing.assert_allclose(np.linalg.norm(ut, axis=1), 1.0, atol=1e-10)
    r = reward(enc, x, tok)
    assert np.all((r >= -1) & (r <= 1))
    assert np.array_equal(enc.encode_motion(x), um)


class _Fixed:
    def __init__(self, m, t):
        self.m, self.t = m, t

    def encode_motion(self, x):
        return self.m

    def encode_text(self, tok):
        return self.t


def test_reward_identical_and_orthogonal():
    e = np.eye(4)
    assert reward(_Fixed(e[:1], e[:1]), None, None)[0] == 1.0
    assert reward(_Fixed(e[:1], e[1:2]), None, None)[0] == 0.0


def test_batch_of_one_has_zero_loss():
    enc = DualEncoder.create(SMALL, seed=0)
    rng = np.random.default_rng(0)
    assert enc.info_nce(rng.normal(size=(1, 32, 6)), _tokens(1, rng)) == pytest.approx(0.0, abs=1e-12)


class _Aligned(DualEncoder):
    """Both towers return the same orthonormal rows."""

    def _motion(self, x0, cache=False):
        return np.eye(self.config.embed)[: len(x0)], None

    def _text(self, tokens, cache=False):
        return np.eye(self.config.embed)[: len(tokens)], None


def test_aligned_embeddings_low_temperature_limit():
    base = DualEncoder.create(SMALL, seed=0)
    enc = _Aligned(SMALL, base.params)
    x, tok = np.zeros((4, 32, 6)), np.zeros((4, 12), dtype=int)
    losses = []
    for tau in (0.5, 0.05, 0.01):
        enc.params["log_tau"][0] = np.log(tau)
        losses.append(enc.info_nce(x, tok))
    assert losses[0] > losses[1] > losses[2]
    assert losses[2] < 1e-40


def test_info_nce_fd_gradients():
    rng = np.random.default_rng(1)
    enc = DualEncoder.create(SMALL, seed=1)
    x, tok = rng.normal(size=(4, 32, 6)), _tokens(4, rng)
    _, grads = enc.info_nce(x, tok, with_grads=True)
    assert set(grads) == set(enc.params.names())
    pairs = [(enc.params[n], grads[n]) for n in enc.params.names()]
    assert fd_rel_error(lambda: enc.info_nce(x, tok), pairs, max_coords=30, rng=rng) < 1e-5


def test_freeze_contract():
    enc = DualEncoder.create(SMALL, seed=0)
    before = enc.checksum()
    enc.freeze()
    with pytest.raises(ValueError):
        enc.params["log_tau"][0] = 0.0
    with pytest.raises(ValueError):
        train_contrastive(enc, np.zeros((2, 32, 6)), np.zeros((2, 12), int), [ALL_SPECS[0]] * 2, iters=1)
    assert enc.checksum() == before


def test_trained_encoder_family_structure(toy_encoder):
    rng = np.random.default_rng(9)
    recs = make_records(("line-east", "spin-left", "stand-still"), 6, rng)
    f = toy_encoder.encode_motion(stack_frames(recs))
    fam = np.array([r.spec.family for r in recs])
    S = f @ f.T
    same = (fam[:, None] == fam[None]) & ~np.eye(len(fam), dtype=bool)
    cross = fam[:, None] != fam[None]
    assert S[same].mean() > S[cross].mean()


def test_trained_encoder_matched_beats_shuffled(toy_encoder):
    recs = make_records(("line-east", "spin-left", "stand-still"), 6, np.random.default_rng(10))
    m = reward_margin(toy_encoder, stack_frames(recs), stack_tokens(recs), [r.spec for r in recs], n=100)
    assert m > 0.2


def test_training_deterministic():
    recs = make_records(("zigzag", "spin-left"), 3, np.random.default_rng(0))
    sums = []
    for _ in range(2):
        enc = DualEncoder.create(SMALL, seed=4)
        train_contrastive(enc, stack_frames(recs), stack_tokens(recs), [r.spec for r in recs], iters=5, batch=8,
                          seed=4)
        sums.append(enc.checksum())
    assert sums[0] == sums[1]


def test_spec_tokens_encode_consistently(toy_encoder):
    tok = np.array([spec_tokens(s).ids for s in ALL_SPECS[:5]])
    assert np.array_equal(toy_encoder.encode_text(tok), toy_encoder.encode_text(tok.copy()))
