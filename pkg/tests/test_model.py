import numpy as np
import pytest
import torch
from torch import nn

from conftest import synthetic_data
from notecode.model import (MODE_ALIASES, ModelConfig, VisitSequenceBatch, aggregate_diag_proc, combine,
                            embed_codes, make_batch, predict_probabilities, project_text, resolve_mode,
                            select_medications)


def _cfg(mode="C+T", **kw):
    base = dict(embed_dim=16, text_dim=16, ff_dim=32, attention_heads=2, mode=mode, seed=1)
    base.update(kw)
    return ModelConfig(**base)


class TestBlocks:
    def test_embed(self):
        W = torch.randn(5, 3)
        assert not embed_codes(W, torch.zeros(5)).any()
        torch.testing.assert_close(embed_codes(W, torch.eye(5)[2]), W[2])
        c1, c2 = torch.tensor([1.0, 0, 1, 0, 0]), torch.tensor([0.0, 1, 0, 0, 1])
        torch.testing.assert_close(embed_codes(W, c1 + c2), embed_codes(W, c1) + embed_codes(W, c2))
        with pytest.raises(ValueError):
            embed_codes(W, torch.zeros(4))

    def test_aggregate(self):
        h_d, h_p = torch.randn(3), torch.randn(3)
        ident = lambda x: x
        torch.testing.assert_close(aggregate_diag_proc(h_d, torch.zeros(3), ident), h_d)
        torch.testing.assert_close(aggregate_diag_proc(h_d, h_p, ident), aggregate_diag_proc(h_p, h_d, ident))
        f = nn.Linear(2, 2)
        with torch.no_grad():
            f.weight.copy_(torch.tensor([[1.0, 2.0], [0.0, -1.0]]))
            f.bias.copy_(torch.tensor([0.5, 0.0]))
        out = aggregate_diag_proc(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0]), lambda x: torch.relu(f(x)))
        torch.testing.assert_close(out, torch.tensor([3.5, 0.0]))

    def test_project(self):
        proj = nn.Linear(6, 3, bias=False)
        with torch.no_grad():
            proj.weight.copy_(torch.eye(3, 6))
        x = torch.randn(2, 4, 6)
        torch.testing.assert_close(project_text(x, proj), x[..., :3])
        torch.testing.assert_close(project_text(2 * x, proj), 2 * project_text(x, proj))
        assert not project_text(torch.zeros(1, 6), proj).any()
        with pytest.raises(ValueError):
            project_text(torch.zeros(1, 5), proj)

    def test_combine(self):
        V, R = torch.randn(2, 3, 4), torch.randn(2, 3, 4)
        torch.testing.assert_close(combine(V, torch.zeros_like(V), "combined"), V)
        assert combine(V, R, "C") is V and combine(V, None, "codes_only") is V
        torch.testing.assert_close(combine(V, R, "C+T") - V, R)
        assert combine(None, R, "T") is R
        for mode in ("C+T", "T"):
            with pytest.raises(ValueError, match="text"):
                combine(V, None, mode)

    def test_probabilities(self):
        assert predict_probabilities(torch.zeros(1)).item() == 0.5
        probs = predict_probabilities(torch.tensor([[-10.0, 10.0]]))
        assert select_medications(probs, 0.5) == [frozenset({1})]
        assert select_medications(predict_probabilities(torch.randn(4, 6) * 5), 1.0) == [frozenset()] * 4

    def test_modes(self):
        assert {resolve_mode(m) for m in MODE_ALIASES} == {"codes_only", "text_only", "combined"}
        with pytest.raises(ValueError):
            resolve_mode("X")
        with pytest.raises(ValueError):
            ModelConfig(embed_dim=10, attention_heads=4)


def _batch(data, n=4):
    pats = [p for p in data.dataset.patients if len(p.visits) >= 3][:n]
    return make_batch(pats, data.corpus), pats


def _perturb(batch, b, t, rng):
    meds = batch.medications.clone()
    meds[b, t] = torch.from_numpy((rng.random(meds.shape[-1]) < 0.5).astype(np.float32))
    text = batch.text.clone()
    text[b, t] = torch.from_numpy(rng.standard_normal(text.shape[-1]).astype(np.float32))
    return VisitSequenceBatch(batch.node_ids, batch.mask, meds, text)


class TestSequenceModel:
    def test_encoder_causal(self, small_data):
        model = small_data.build_model(_cfg()).eval()
        rng = np.random.default_rng(0)
        V, R = torch.randn(2, 5, 16), torch.randn(2, 5, 16)
        with torch.no_grad():
            V0, R0 = model.encode_sequences(V, R)
            for t in range(4):
                V2, R2 = V.clone(), R.clone()
                V2[:, t + 1:] += torch.from_numpy(rng.standard_normal((2, 4 - t, 16)).astype(np.float32))
                R2[:, t + 1:] -= 3.0
                V1, R1 = model.encode_sequences(V2, R2)
                assert torch.equal(V1[:, : t + 1], V0[:, : t + 1]) and torch.equal(R1[:, : t + 1], R0[:, : t + 1])

    def test_single_visit_encoder(self, small_data):
        model = small_data.build_model(_cfg()).eval()
        V = torch.randn(1, 1, 16)
        with torch.no_grad():
            a, _ = model.encode_sequences(V, None)
            b, _ = model.encode_sequences(torch.cat([V, torch.randn(1, 2, 16)], 1), None)
        torch.testing.assert_close(a[:, 0], b[:, 0])

    def test_decoder_causal(self, small_data):
        model = small_data.build_model(_cfg()).eval()
        L = torch.randn(1, 4, 16)
        meds = (torch.rand(1, 4, model.sizes["medication"]) < 0.3).float()
        with torch.no_grad():
            base = model.decode(L, model.medication_history(meds, None))
            for t in range(4):
                m2 = meds.clone()
                m2[0, t] = 1 - m2[0, t]
                out = model.decode(L, model.medication_history(m2, None))
                assert torch.equal(out[:, : t + 1], base[:, : t + 1])
            with pytest.raises(ValueError):
                model.decode(L, torch.zeros(1, 3, 16))

    def test_forward_causal(self, small_data):
        batch, _ = _batch(small_data)
        g = small_data.graphs["train"]
        rng = np.random.default_rng(1)
        for mode in ("C", "T", "C+T"):
            model = small_data.build_model(_cfg(mode)).eval()
            with torch.no_grad():
                base = model(batch, small_data.corpus, g).probabilities
                for t in range(2):
                    out = model(_perturb(batch, 0, t + 1, rng), small_data.corpus, g).probabilities
                    assert torch.equal(out[0, : t + 1], base[0, : t + 1])

    def test_zero_head_half(self, small_data):
        model = small_data.build_model(_cfg()).eval()
        with torch.no_grad():
            model.head.weight.zero_()
            model.head.bias.zero_()
            out = model(_batch(small_data)[0], small_data.corpus, small_data.graphs["train"])
        assert torch.all(out.probabilities == 0.5)

    def test_mode_c_ignores_text(self, small_data):
        batch, _ = _batch(small_data)
        model = small_data.build_model(_cfg("C")).eval()
        zero = VisitSequenceBatch(batch.node_ids, batch.mask, batch.medications, torch.zeros_like(batch.text))
        with torch.no_grad():
            a = model(batch, small_data.corpus, small_data.graphs["train"]).logits
            b = model(zero, small_data.corpus, small_data.graphs["train"]).logits
        assert torch.equal(a, b)

    def test_mode_t_ignores_codes(self, small_data):
        batch, _ = _batch(small_data)
        model = small_data.build_model(_cfg("T")).eval()
        flipped = VisitSequenceBatch(batch.node_ids.flip(0), batch.mask, 1 - batch.medications, batch.text)
        with torch.no_grad():
            a = model(batch, small_data.corpus, small_data.graphs["train"]).logits
            b = model(flipped, small_data.corpus, small_data.graphs["train"]).logits
        assert torch.equal(a, b)

    def test_batch_of_one(self, small_data):
        batch, pats = _batch(small_data)
        model = small_data.build_model(_cfg()).eval()
        g = small_data.graphs["train"]
        with torch.no_grad():
            full = model(batch, small_data.corpus, g).probabilities
            for b, p in enumerate(pats):
                single = model(make_batch([p], small_data.corpus), small_data.corpus, g).probabilities
                n = len(p.visits)
                torch.testing.assert_close(single[0, :n], full[b, :n], atol=1e-6, rtol=1e-5)

    def test_outputs_in_open_interval(self, small_data):
        model = small_data.build_model(_cfg()).eval()
        with torch.no_grad():
            out = model(_batch(small_data)[0], small_data.corpus, small_data.graphs["train"])
        assert torch.isfinite(out.logits).all()
        assert ((out.probabilities > 0) & (out.probabilities < 1)).all()

    def test_seeded_init(self, small_data):
        a = small_data.build_model(_cfg()).state_dict()
        b = small_data.build_model(_cfg()).state_dict()
        assert all(torch.equal(a[k], b[k]) for k in a)

    def test_text_required(self, small_data):
        batch, _ = _batch(small_data)
        model = small_data.build_model(_cfg("C+T")).eval()
        no_text = VisitSequenceBatch(batch.node_ids, batch.mask, batch.medications, None)
        with pytest.raises(ValueError, match="extract"):
            model(no_text, small_data.corpus, small_data.graphs["train"])

    def test_med_history_via_gcn(self, small_data):
        model = small_data.build_model(_cfg("C", med_history_via_gcn=True)).eval()
        with torch.no_grad():
            out = model(_batch(small_data)[0], small_data.corpus, small_data.graphs["train"])
        assert torch.isfinite(out.logits).all()
