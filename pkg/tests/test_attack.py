import json

import numpy as np
import pytest

from splitdp import (
    AttackReport,
    EmbeddingTable,
    InvalidInputError,
    MechanismParams,
    PipelineConfig,
    RngHandle,
    TokenSequence,
    clamped_latents,
    dequantize,
    identity_pair,
    invert_embeddings,
    latent_reference,
    predict_tokens,
    privatize_tokens,
)


def random_table(V, b, seed):
    return EmbeddingTable(RngHandle(seed).generator().standard_normal((V, b)))


class TestPredictTokens:
    def test_exact_rows_recovered(self):
        ref = random_table(12, 5, 0).rows
        ids = [3, 0, 7, 11]
        for metric in ("cosine", "l2"):
            np.testing.assert_array_equal(predict_tokens(ref[ids], ref, metric), ids)

    def test_cosine_scale_invariant(self):
        ref = random_table(9, 4, 1).rows
        obs = ref[[2, 5]]
        np.testing.assert_array_equal(
            predict_tokens(obs * 1e-3, ref, "cosine"), predict_tokens(obs * 1e3, ref, "cosine")
        )

    def test_l2_not_scale_invariant_on_magnitudes(self):
        # two collinear rows of different norms: l2 separates, cosine cannot
        ref = np.array([[1.0, 0.0], [3.0, 0.0], [0.0, 1.0]])
        obs = np.array([[3.0, 0.0]])
        assert predict_tokens(obs, ref, "l2")[0] == 1
        assert predict_tokens(obs, ref, "cosine")[0] == 0  # tie -> lowest index

    def test_unknown_metric(self):
        with pytest.raises(InvalidInputError):
            predict_tokens(np.zeros((1, 2)), np.zeros((3, 2)), "manhattan")

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidInputError):
            predict_tokens(np.zeros((1, 2)), np.zeros((3, 4)))


class TestInvertEmbeddings:
    def test_zero_noise_perfect(self):
        table = random_table(20, 6, 2)
        truth = TokenSequence([0, 5, 5, 19, 3])
        report = invert_embeddings(table.rows[list(truth.ids)], table.rows, truth)
        assert report.asr == 1.0
        assert report.recovered == report.total == 5
        assert np.all(report.hits)

    def test_derangement_zero_asr(self):
        table = random_table(8, 6, 3)
        truth = TokenSequence([1, 2, 3, 4, 5, 6, 7, 0])  # fixed-point-free shift
        obs = table.rows[[(i + 1) % 8 for i in truth.ids]]
        report = invert_embeddings(obs, table.rows, truth)
        assert report.asr == 0.0

    def test_length_mismatch(self):
        table = random_table(4, 3, 4)
        with pytest.raises(InvalidInputError):
            invert_embeddings(table.rows[:2], table.rows, TokenSequence([0, 1, 2]))

    def test_chance_level_under_heavy_noise(self):
        V, d, T = 32, 4, 4000
        table = random_table(V, d, 5)
        params = MechanismParams(c=0.05, A=50.0, n=1, d=d)
        cfg = PipelineConfig(table=table, proj=identity_pair(d), params=params)
        ids = RngHandle(6).generator().integers(0, V, T)
        truth = TokenSequence(ids)
        q = privatize_tokens(truth, cfg, RngHandle(7))
        ref = latent_reference(table, cfg.proj, params.c)
        report = invert_embeddings(dequantize(q), ref, truth)
        se = np.sqrt((1 / V) * (1 - 1 / V) / T)
        assert report.asr == pytest.approx(1 / V, abs=3 * se)


class TestLatentReference:
    def test_matches_pipeline_latents(self):
        table = random_table(10, 4, 8)
        pp = identity_pair(4)
        params = MechanismParams(c=0.05, A=0.1, n=1, d=4)
        cfg = PipelineConfig(table=table, proj=pp, params=params)
        ids = TokenSequence(range(10))
        ref = latent_reference(table, pp, params.c)
        np.testing.assert_array_equal(ref, clamped_latents(table.embed(ids), cfg).values)

    def test_clamped_to_c(self):
        ref = latent_reference(random_table(6, 3, 9), identity_pair(3), 0.05)
        assert np.all(np.abs(ref) <= 0.05)


class TestReport:
    def test_json_fields(self):
        report = AttackReport(total=10, recovered=4, hits=np.zeros(10, bool), metric="cosine")
        data = json.loads(report.to_json())
        assert data == {
            "total": 10,
            "recovered": 4,
            "asr": 0.4,
            "metric": "cosine",
            "space": "latent",
        }
