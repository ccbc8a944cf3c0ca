import numpy as np
import pytest

from fedsrd.errors import EmptyCohortError
from fedsrd.linalg import svd_full
from fedsrd.lora import LoraPair
from fedsrd.server import (
    ClientMirror,
    ClientUpdate,
    GlobalDownload,
    LayerUpload,
    ProjectionMode,
    absorb_upload,
    apply_download,
    decompose_even,
    decompose_odd,
    initial_state,
    project_global,
    reconstruct_aggregate,
    srd_round,
)
from fedsrd.wire import SparseDelta


def random_pair(rng, d_out=6, rank=3, d_in=5):
    return LoraPair(rng.standard_normal((d_out, rank)), rng.standard_normal((rank, d_in)))


def dense_upload(pair_delta_b, pair_delta_a):
    return LayerUpload(SparseDelta.full(pair_delta_b), SparseDelta.full(pair_delta_a))


def empty_upload(pair):
    return LayerUpload(
        SparseDelta.empty(*pair.b.shape), SparseDelta.empty(*pair.a.shape)
    )


class TestAbsorbUpload:
    def test_empty_deltas_leave_mirror_unchanged(self):
        rng = np.random.default_rng(0)
        mirror = ClientMirror(pairs=(random_pair(rng),))
        out = absorb_upload(mirror, ClientUpdate(layers=(empty_upload(mirror.pairs[0]),)))
        np.testing.assert_array_equal(out.pairs[0].b, mirror.pairs[0].b)
        np.testing.assert_array_equal(out.pairs[0].a, mirror.pairs[0].a)

    def test_full_upload_reconstructs_trained_state(self):
        rng = np.random.default_rng(1)
        mirror_pair = random_pair(rng)
        trained = random_pair(rng)
        upload = dense_upload(trained.b - mirror_pair.b, trained.a - mirror_pair.a)
        out = absorb_upload(ClientMirror((mirror_pair,)), ClientUpdate((upload,)))
        np.testing.assert_allclose(out.pairs[0].b, trained.b, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(out.pairs[0].a, trained.a, rtol=1e-12, atol=1e-15)

    def test_sequential_uploads_commute_with_sum(self):
        rng = np.random.default_rng(2)
        mirror = ClientMirror(pairs=(random_pair(rng),))
        d1b, d1a = rng.standard_normal((6, 3)), rng.standard_normal((3, 5))
        d2b, d2a = rng.standard_normal((6, 3)), rng.standard_normal((3, 5))
        seq = absorb_upload(
            absorb_upload(mirror, ClientUpdate((dense_upload(d1b, d1a),))),
            ClientUpdate((dense_upload(d2b, d2a),)),
        )
        summed = absorb_upload(mirror, ClientUpdate((dense_upload(d1b + d2b, d1a + d2a),)))
        np.testing.assert_allclose(seq.pairs[0].b, summed.pairs[0].b, atol=1e-12)
        np.testing.assert_allclose(seq.pairs[0].a, summed.pairs[0].a, atol=1e-12)


class TestReconstructAggregate:
    def test_single_client_is_its_product(self):
        rng = np.random.default_rng(3)
        pair = random_pair(rng)
        (agg,) = reconstruct_aggregate([ClientMirror((pair,))])
        np.testing.assert_allclose(agg, pair.b @ pair.a)

    def test_opposite_products_cancel(self):
        rng = np.random.default_rng(4)
        pair = random_pair(rng)
        negated = LoraPair(-pair.b, pair.a)
        (agg,) = reconstruct_aggregate([ClientMirror((pair,)), ClientMirror((negated,))])
        np.testing.assert_allclose(agg, np.zeros_like(agg), atol=1e-12)

    def test_differs_from_product_of_averages(self):
        rng = np.random.default_rng(5)
        p1, p2 = random_pair(rng), random_pair(rng)
        (agg,) = reconstruct_aggregate([ClientMirror((p1,)), ClientMirror((p2,))])
        separate = ((p1.b + p2.b) / 2) @ ((p1.a + p2.a) / 2)
        assert np.linalg.norm(agg - separate) > 1e-6  # the aggregation cross-term

    def test_permutation_invariant_and_linear(self):
        rng = np.random.default_rng(6)
        mirrors = [ClientMirror((random_pair(rng),)) for _ in range(4)]
        (base,) = reconstruct_aggregate(mirrors)
        (permuted,) = reconstruct_aggregate(mirrors[::-1])
        np.testing.assert_allclose(base, permuted, atol=1e-12)
        # scaling one client's product scales the average by 1/m of the change
        scaled = [ClientMirror((LoraPair(2.0 * mirrors[0].pairs[0].b, mirrors[0].pairs[0].a),))] + mirrors[1:]
        (scaled_agg,) = reconstruct_aggregate(scaled)
        expected = base + (mirrors[0].pairs[0].b @ mirrors[0].pairs[0].a) / 4
        np.testing.assert_allclose(scaled_agg, expected, atol=1e-12)

    def test_empty_cohort(self):
        with pytest.raises(EmptyCohortError):
            reconstruct_aggregate([])


class TestProjectGlobal:
    def test_efficient_mode_is_identity(self):
        rng = np.random.default_rng(7)
        w = rng.standard_normal((6, 6))
        np.testing.assert_array_equal(project_global(w, 2, ProjectionMode.EFFICIENT), w)

    def test_low_rank_input_unchanged_in_full_mode(self):
        rng = np.random.default_rng(8)
        w = rng.standard_normal((8, 2)) @ rng.standard_normal((2, 8))
        projected = project_global(w, 2, ProjectionMode.FULL)
        assert np.linalg.norm(projected - w) < 1e-9

    def test_full_mode_matches_truncation_oracle(self):
        rng = np.random.default_rng(9)
        w = rng.standard_normal((9, 7))
        projected = project_global(w, 2, ProjectionMode.FULL)
        s = svd_full(w).singular_values
        err = np.linalg.norm(w - projected)
        assert abs(err - np.sqrt(np.sum(s[2:] ** 2))) < 1e-8

    def test_full_mode_numerical_rank(self):
        rng = np.random.default_rng(10)
        w = rng.standard_normal((12, 12))
        projected = project_global(w, 3, ProjectionMode.FULL)
        s = svd_full(projected).singular_values
        assert s[3] < 1e-9 * s[0]


class TestDecompose:
    def test_zero_diff_gives_zero(self):
        rng = np.random.default_rng(11)
        b = rng.standard_normal((6, 3))
        a = rng.standard_normal((3, 5))
        assert np.all(decompose_even(np.zeros((6, 5)), b) == 0.0)
        assert np.all(decompose_odd(np.zeros((6, 5)), a) == 0.0)

    def test_consistent_system_recovery(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            b = rng.standard_normal((8, 3))
            x = rng.standard_normal((3, 6))
            np.testing.assert_allclose(decompose_even(b @ x, b), x, atol=1e-8)
            a = rng.standard_normal((3, 6))
            y = rng.standard_normal((8, 3))
            np.testing.assert_allclose(decompose_odd(y @ a, a), y, atol=1e-8)

    def test_orthonormal_factor_is_transpose_solve(self):
        rng = np.random.default_rng(13)
        q, _ = np.linalg.qr(rng.standard_normal((7, 3)))
        w_diff = rng.standard_normal((7, 4))
        np.testing.assert_allclose(decompose_even(w_diff, q), q.T @ w_diff, atol=1e-10)
        qa, _ = np.linalg.qr(rng.standard_normal((6, 3)))
        w2 = rng.standard_normal((5, 6))
        np.testing.assert_allclose(decompose_odd(w2, qa.T), w2 @ qa, atol=1e-10)

    def test_residual_satisfies_normal_equations(self):
        rng = np.random.default_rng(14)
        for _ in range(20):
            b = rng.standard_normal((9, 3))
            w_diff = rng.standard_normal((9, 6))  # generically inconsistent
            delta_a = decompose_even(w_diff, b)
            np.testing.assert_allclose(
                b.T @ (w_diff - b @ delta_a), np.zeros((3, 6)), atol=1e-8
            )
            a = rng.standard_normal((3, 7))
            w2 = rng.standard_normal((5, 7))
            delta_b = decompose_odd(w2, a)
            np.testing.assert_allclose(
                (w2 - delta_b @ a) @ a.T, np.zeros((5, 3)), atol=1e-8
            )

    def test_least_squares_optimality(self):
        rng = np.random.default_rng(15)
        b = rng.standard_normal((8, 3))
        w_diff = rng.standard_normal((8, 5))
        delta_a = decompose_even(w_diff, b)
        best = np.linalg.norm(w_diff - b @ delta_a)
        for _ in range(100):
            perturbed = delta_a + rng.standard_normal(delta_a.shape) * rng.random()
            assert best <= np.linalg.norm(w_diff - b @ perturbed) + 1e-12


def build_state_and_clients(rng, mode, num_clients=2, layers=1, zero_b=False):
    pairs = []
    for _ in range(layers):
        pair = random_pair(rng)
        if zero_b:
            pair = LoraPair(np.zeros_like(pair.b), pair.a)
        pairs.append(pair)
    state = initial_state(tuple(pairs), mode)
    mirrors = [ClientMirror(tuple(pairs)) for _ in range(num_clients)]
    return state, mirrors


class TestSrdRound:
    def test_fixed_point_zero_uploads(self):
        rng = np.random.default_rng(16)
        state, mirrors = build_state_and_clients(rng, ProjectionMode.EFFICIENT)
        uploads = [ClientUpdate((empty_upload(state.pairs[0]),)) for _ in mirrors]
        download, new_state, diag = srd_round(state, mirrors, uploads, 0.0, seed=0)
        assert download.side == "b"  # t = 1 is odd
        np.testing.assert_array_equal(download.b_deltas[0].to_dense(), 0.0 * state.pairs[0].b)
        np.testing.assert_array_equal(new_state.pairs[0].b, state.pairs[0].b)
        assert new_state.round_index == 1

    def test_parity_alternation(self):
        rng = np.random.default_rng(17)
        state, mirrors = build_state_and_clients(rng, ProjectionMode.EFFICIENT)
        sides = []
        for t in range(1, 5):
            uploads = [
                ClientUpdate(
                    (
                        dense_upload(
                            0.01 * rng.standard_normal((6, 3)),
                            0.01 * rng.standard_normal((3, 5)),
                        ),
                    )
                )
                for _ in mirrors
            ]
            download, state, _ = srd_round(state, mirrors, uploads, 0.0, seed=t)
            mirrors = [apply_download(m, download) for m in mirrors]
            sides.append(download.side)
            # exactly one side present
            assert (download.b_deltas is None) != (download.a_deltas is None)
        assert sides == ["b", "a", "b", "a"]

    def test_even_round_projection_identity(self):
        # one client, dense upload, no download sparsity, efficient mode:
        # the new global product is the old one plus the column-space
        # projection of the aggregate movement
        rng = np.random.default_rng(18)
        state, mirrors = build_state_and_clients(rng, ProjectionMode.EFFICIENT)
        # advance to round 1 so the next round is even
        uploads = [ClientUpdate((empty_upload(state.pairs[0]),))]
        download, state, _ = srd_round(state, mirrors, uploads, 0.0, seed=0)
        mirrors = [apply_download(mirrors[0], download)]

        db = 0.05 * rng.standard_normal((6, 3))
        da = 0.05 * rng.standard_normal((3, 5))
        uploads = [ClientUpdate((dense_upload(db, da),))]
        old_product = state.pairs[0].product()
        b_prev = state.pairs[0].b
        client_pair = mirrors[0].pairs[0]
        new_client_product = (client_pair.b + db) @ (client_pair.a + da)
        w_diff = new_client_product - state.refs[0]

        download, new_state, _ = srd_round(state, mirrors, uploads, 0.0, seed=1)
        assert download.side == "a"
        projector = b_prev @ np.linalg.pinv(b_prev)
        expected = old_product + projector @ w_diff
        np.testing.assert_allclose(new_state.pairs[0].product(), expected, atol=1e-10)

    def test_efficient_ref_is_raw_aggregate(self):
        rng = np.random.default_rng(19)
        state, mirrors = build_state_and_clients(rng, ProjectionMode.EFFICIENT)
        uploads = [
            ClientUpdate((dense_upload(rng.standard_normal((6, 3)), rng.standard_normal((3, 5))),))
            for _ in mirrors
        ]
        absorbed = [absorb_upload(m, u) for m, u in zip(mirrors, uploads)]
        expected_ref = reconstruct_aggregate(absorbed)[0]
        _, new_state, _ = srd_round(state, mirrors, uploads, 0.0, seed=2)
        np.testing.assert_allclose(new_state.refs[0], expected_ref, atol=1e-12)

    def test_full_ref_is_pair_product(self):
        rng = np.random.default_rng(20)
        state, mirrors = build_state_and_clients(rng, ProjectionMode.FULL)
        uploads = [
            ClientUpdate((dense_upload(rng.standard_normal((6, 3)), rng.standard_normal((3, 5))),))
            for _ in mirrors
        ]
        _, new_state, _ = srd_round(state, mirrors, uploads, 0.0, seed=3)
        np.testing.assert_allclose(
            new_state.refs[0], new_state.pairs[0].product(), atol=1e-12
        )

    def test_download_sparsity_zero_broadcast_applies_committed_delta(self):
        rng = np.random.default_rng(21)
        state, mirrors = build_state_and_clients(rng, ProjectionMode.EFFICIENT)
        uploads = [
            ClientUpdate((dense_upload(0.1 * rng.standard_normal((6, 3)), 0.1 * rng.standard_normal((3, 5))),))
            for _ in mirrors
        ]
        download, new_state, _ = srd_round(state, mirrors, uploads, 0.0, seed=4)
        committed = new_state.pairs[0].b - state.pairs[0].b
        np.testing.assert_array_equal(download.b_deltas[0].to_dense(), committed)

    def test_trust_region_caps_committed_norm(self):
        rng = np.random.default_rng(22)
        state, mirrors = build_state_and_clients(rng, ProjectionMode.EFFICIENT)
        # force a huge aggregate movement
        uploads = [
            ClientUpdate((dense_upload(50.0 * rng.standard_normal((6, 3)), 50.0 * rng.standard_normal((3, 5))),))
            for _ in mirrors
        ]
        _, capped, _ = srd_round(state, mirrors, uploads, 0.0, seed=5, max_step_ratio=0.1)
        delta_norm = np.linalg.norm(capped.pairs[0].b - state.pairs[0].b)
        assert delta_norm <= 0.1 * np.linalg.norm(state.pairs[0].b) + 1e-12

    def test_trust_region_skipped_for_zero_factor(self):
        rng = np.random.default_rng(23)
        state, mirrors = build_state_and_clients(rng, ProjectionMode.EFFICIENT, zero_b=True)
        uploads = [
            ClientUpdate((dense_upload(rng.standard_normal((6, 3)), rng.standard_normal((3, 5))),))
            for _ in mirrors
        ]
        _, new_state, _ = srd_round(state, mirrors, uploads, 0.0, seed=6, max_step_ratio=0.1)
        assert np.linalg.norm(new_state.pairs[0].b) > 0.0  # round 1 still builds b

    def test_diagnostics_residual_matches_committed_solve(self):
        rng = np.random.default_rng(24)
        state, mirrors = build_state_and_clients(rng, ProjectionMode.EFFICIENT)
        uploads = [
            ClientUpdate((dense_upload(0.1 * rng.standard_normal((6, 3)), 0.1 * rng.standard_normal((3, 5))),))
            for _ in mirrors
        ]
        absorbed = [absorb_upload(m, u) for m, u in zip(mirrors, uploads)]
        w_diff = reconstruct_aggregate(absorbed)[0] - state.refs[0]
        download, new_state, diag = srd_round(state, mirrors, uploads, 0.0, seed=7)
        committed_db = new_state.pairs[0].b - state.pairs[0].b
        expected = np.linalg.norm(w_diff - committed_db @ state.pairs[0].a)
        assert abs(diag.residuals[0] - expected) < 1e-10


class TestGlobalDownload:
    def test_layer_sides(self):
        sd = SparseDelta.empty(2, 2)
        down = GlobalDownload(b_deltas=(sd,), a_deltas=None)
        assert down.side == "b"
        assert down.layer_sides(0) == (sd, None)
