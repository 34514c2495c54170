import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from polarpos.checkpoint import load_checkpoint, save_checkpoint
from polarpos.encoding import EncodingKind
from polarpos.gradcheck import (check_loss, check_model, check_rmsnorm,
                                tiny_model_config)
from polarpos.model import ModelConfig, Transformer, loss, rmsnorm


def small_config(encoding=EncodingKind.POPE, vocab=20):
    return ModelConfig(vocab_size=vocab, embed_dim=32, n_layers=2, n_heads=2,
                       max_seq_len=16, encoding=encoding, bias_init="uniform")


def make_model(encoding=EncodingKind.POPE, seed=0, vocab=20):
    model = Transformer(small_config(encoding, vocab))
    model.init_parameters(seed=seed)
    model.eval()
    return model


class TestForward:
    def test_identical_sequences_identical_logits(self):
        model = make_model()
        tokens = torch.randint(0, 20, (1, 7), generator=torch.Generator().manual_seed(0))
        batch = tokens.repeat(3, 1)
        logits = model(batch)
        torch.testing.assert_close(logits[0], logits[1])
        torch.testing.assert_close(logits[0], logits[2])

    def test_batch_permutation(self):
        model = make_model()
        g = torch.Generator().manual_seed(1)
        tokens = torch.randint(0, 20, (4, 7), generator=g)
        logits = model(tokens)
        perm = torch.tensor([2, 0, 3, 1])
        logits_perm = model(tokens[perm])
        torch.testing.assert_close(logits_perm, logits[perm])

    def test_causality_exact(self):
        model = make_model()
        g = torch.Generator().manual_seed(2)
        tokens = torch.randint(0, 20, (1, 8), generator=g)
        logits = model(tokens)
        tokens2 = tokens.clone()
        tokens2[0, 5:] = (tokens2[0, 5:] + 1) % 20
        logits2 = model(tokens2)
        assert torch.equal(logits[0, :5], logits2[0, :5])

    def test_rejects_out_of_range_tokens(self):
        model = make_model()
        with pytest.raises(ValueError):
            model(torch.tensor([[0, 25]]))

    def test_forward_beyond_max_seq_len(self):
        # positional schedules are closed-form; longer sequences must work
        model = make_model()
        tokens = torch.randint(0, 20, (1, 40),
                               generator=torch.Generator().manual_seed(3))
        logits = model(tokens)
        assert logits.shape == (1, 40, 20)
        assert torch.isfinite(logits).all()

    @pytest.mark.parametrize("encoding", list(EncodingKind))
    def test_all_encodings_finite(self, encoding):
        model = make_model(encoding)
        tokens = torch.randint(0, 20, (2, 6),
                               generator=torch.Generator().manual_seed(4))
        assert torch.isfinite(model(tokens)).all()

    def test_straight_line_oracle(self):
        # independent re-implementation of the forward pass in plain tensor ops
        from polarpos.attention import attend
        model = make_model(EncodingKind.POPE, seed=5)
        cfg = model.cfg
        acfg = cfg.attention_config()
        g = torch.Generator().manual_seed(6)
        tokens = torch.randint(0, 20, (1, 4), generator=g)
        T = tokens.shape[1]

        x = model.tok_emb(tokens)
        for block in model.blocks:
            h = rmsnorm(x, block.norm_attn.gain)
            B = 1
            def split(t):
                return t.view(B, T, cfg.n_heads, cfg.head_dim).transpose(1, 2)
            q, k, v = split(block.attn.wq(h)), split(block.attn.wk(h)), split(block.attn.wv(h))
            deltas = block.attn.deltas.unsqueeze(1)
            att = attend(q, k, v, acfg, deltas=deltas)
            att = att.transpose(1, 2).reshape(B, T, cfg.embed_dim)
            x = x + block.attn.wo(att)
            h2 = rmsnorm(x, block.norm_mlp.gain)
            x = x + block.mlp.fc_out(F.gelu(block.mlp.fc_in(h2)))
        expected = model.lm_head(rmsnorm(x, model.norm_out.gain))
        got = model(tokens)
        torch.testing.assert_close(got, expected, atol=1e-6, rtol=1e-6)


class TestLoss:
    def test_uniform_logits_give_log_vocab(self):
        V = 13
        logits = torch.zeros(2, 5, V)
        targets = torch.randint(0, V, (2, 5))
        assert float(loss(logits, targets)) == pytest.approx(math.log(V), abs=1e-6)

    def test_one_hot_correct_goes_to_zero(self):
        V = 13
        targets = torch.randint(0, V, (2, 5))
        logits = F.one_hot(targets, V).float() * 100.0
        assert float(loss(logits, targets)) < 1e-6

    def test_matches_double_precision_log_softmax(self):
        g = torch.Generator().manual_seed(7)
        logits = torch.randn(2, 4, 9, generator=g, dtype=torch.float64)
        targets = torch.randint(0, 9, (2, 4), generator=g)
        lp = F.log_softmax(logits, dim=-1)
        expected = -lp.gather(-1, targets.unsqueeze(-1)).mean()
        assert float(loss(logits, targets)) == pytest.approx(float(expected), abs=1e-12)

    def test_final_token_only_selects_one_position(self):
        g = torch.Generator().manual_seed(8)
        logits = torch.randn(3, 6, 9, generator=g)
        targets = torch.randint(0, 9, (3,), generator=g)
        pos = torch.tensor([1, 4, 2])
        got = loss(logits, targets, mode="final_token_only", target_positions=pos)
        picked = torch.stack([logits[i, pos[i]] for i in range(3)])
        expected = F.cross_entropy(picked, targets)
        assert float(got) == pytest.approx(float(expected), abs=1e-7)

    def test_ignore_index_excluded(self):
        logits = torch.zeros(1, 4, 5)
        targets = torch.tensor([[1, -1, 2, -1]])
        assert float(loss(logits, targets)) == pytest.approx(math.log(5), abs=1e-6)

    def test_empty_selection_rejected(self):
        logits = torch.zeros(1, 3, 5)
        targets = torch.full((1, 3), -1)
        with pytest.raises(ValueError):
            loss(logits, targets)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            loss(torch.zeros(1, 2, 3), torch.zeros(1, 2, dtype=torch.long),
                 mode="sometimes")


class TestRMSNorm:
    def test_ones_fixed_point(self):
        x = torch.ones(8, dtype=torch.float64)
        out = rmsnorm(x, torch.ones(8, dtype=torch.float64))
        torch.testing.assert_close(out, x, atol=1e-5, rtol=1e-5)

    def test_scale_invariance(self):
        g = torch.Generator().manual_seed(9)
        x = torch.randn(8, generator=g, dtype=torch.float64)
        gain = torch.randn(8, generator=g, dtype=torch.float64)
        a = rmsnorm(x, gain)
        b = rmsnorm(3.7 * x, gain)
        torch.testing.assert_close(a, b, atol=1e-5, rtol=1e-4)

    def test_matches_formula(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=8)
        gain = rng.normal(size=8)
        expected = x * gain / np.sqrt(np.mean(x ** 2) + 1e-5)
        got = rmsnorm(torch.from_numpy(x), torch.from_numpy(gain)).numpy()
        np.testing.assert_allclose(got, expected, atol=1e-12)


class TestGradients:
    def test_rmsnorm_gradcheck(self):
        assert check_rmsnorm(seed=1) <= 1e-4

    def test_loss_gradcheck(self):
        assert check_loss(seed=1) <= 1e-4

    def test_tiny_model_gradcheck_includes_deltas(self):
        errors = check_model(seed=0)
        assert any(".deltas" in name for name in errors)
        worst = max(errors.values())
        assert worst <= 1e-4, f"worst group {max(errors, key=errors.get)}: {worst}"


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        model = make_model(seed=11)
        tokens = torch.randint(0, 20, (2, 6),
                               generator=torch.Generator().manual_seed(12))
        before = model(tokens)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model, step=42,
                        rng_state=torch.get_rng_state(), extra={"note": "x"})
        loaded, info = load_checkpoint(path)
        loaded.eval()
        after = loaded(tokens)
        assert torch.equal(before, after)
        assert info["step"] == 42
        assert info["extra"]["note"] == "x"

    def test_optimizer_state_round_trip(self, tmp_path):
        model = make_model(seed=13)
        opt_state = {"w.m": torch.randn(3, 4), "w.v": torch.rand(3, 4)}
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model, optimizer_state=opt_state)
        _, info = load_checkpoint(path)
        for name, t in opt_state.items():
            assert torch.equal(info["optimizer_state"][name], t)

    def test_rng_state_round_trip(self, tmp_path):
        model = make_model(seed=14)
        state = torch.get_rng_state()
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model, rng_state=state)
        _, info = load_checkpoint(path)
        assert torch.equal(info["rng_state"], state)


class TestParameterParity:
    def test_rope_pope_differ_only_by_deltas(self):
        rope = Transformer(small_config(EncodingKind.ROPE))
        pope = Transformer(small_config(EncodingKind.POPE))
        cfg = small_config()
        expected_extra = cfg.head_dim * cfg.n_heads * cfg.n_layers
        assert pope.n_params() - rope.n_params() == expected_extra
        no_bias = Transformer(small_config(EncodingKind.POPE_NO_BIAS))
        assert no_bias.n_params() == rope.n_params()
