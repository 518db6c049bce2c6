import numpy as np
import pytest

import wander


def test_wide_counts():
    dims, lengths = [768] * 3, [10] * 3
    assert wander.count_params("SF-OP", dims, lengths, 768, 10) == 768**4 + 10**4
    assert wander.count_params("SF", dims, lengths, 768, 10) == 8 * 768 * 3 * 768 + 8 * 10 * 30


def test_fusion_matches_brute_force():
    rng = np.random.default_rng(3)
    lengths, dims, d_h, d_t = [2, 3], [3, 2], 2, 2
    seqs = [rng.uniform(-1, 1, (l, d)) for l, d in zip(lengths, dims)]
    f_h = wander.random_factors(2, d_h, dims, seed=1)
    f_t = wander.random_factors(3, d_t, lengths, seed=2)
    # einsum over every token tuple and feature tuple
    w_h = sum(np.einsum("ka,kb->abk", f_h[0][r], f_h[1][r]) for r in range(2))
    w_t = sum(np.einsum("ti,tj->tij", f_t[0][r], f_t[1][r]) for r in range(3))
    expected = np.einsum("ia,jb,abk,tij->tk", seqs[0], seqs[1], w_h, w_t)
    np.testing.assert_allclose(wander.sequence_fusion(seqs, f_h, f_t), expected, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(wander.sequence_fusion_oracle(seqs, f_h, f_t), expected, rtol=1e-12, atol=1e-12)


def test_shape_mismatch_raises():
    f_h = wander.random_factors(1, 2, [3, 2])
    f_t = wander.random_factors(1, 2, [2, 2])
    with pytest.raises(ValueError):
        wander.sequence_fusion([np.ones((2, 3)), np.ones((2, 5))], f_h, f_t)


def test_cli_verify_and_exit_codes():
    code, report = wander.run("verify", "--verify-configs", "5", "--grad-configs", "2")
    assert code == 0
    assert report["status"] == "ok"
    code, _, err = wander.run_cli(["bench", "--sweep", ""])
    assert code == 2
    assert "sweep" in err
