"""Tests for geometry module."""

import itertools
import math

import pytest
import torch

from insegan.geometry import (
    RigidTransform,
    affine_grid,
    axis_angle_to_rotation,
    pose_to_transform,
    skew,
    trilinear_sample,
    zbuffer_composite,
)


def _series_exp(omega: torch.Tensor, terms: int = 30) -> torch.Tensor:
    K = skew(omega)
    out = torch.eye(3, dtype=omega.dtype)
    power = torch.eye(3, dtype=omega.dtype)
    for k in range(1, terms):
        power = power @ K / k
        out = out + power
    return out


class TestAxisAngleToRotation:
    """Tests for axis_angle_to_rotation."""

    def test_matches_exponential_series(self) -> None:
        gen = torch.Generator().manual_seed(0)
        omegas = (torch.rand(100, 3, generator=gen, dtype=torch.float64) * 2 - 1) * math.pi
        R = axis_angle_to_rotation(omegas)
        for omega, rot in zip(omegas, R):
            assert (rot - _series_exp(omega)).abs().max() <= 1e-6

    def test_orthonormal_with_unit_determinant(self) -> None:
        gen = torch.Generator().manual_seed(1)
        omegas = torch.randn(100, 3, generator=gen, dtype=torch.float64) * 2
        R = axis_angle_to_rotation(omegas)
        eye = torch.eye(3, dtype=torch.float64).expand_as(R)
        assert (R.transpose(-1, -2) @ R - eye).abs().max() <= 1e-6
        assert (torch.linalg.det(R) - 1).abs().max() <= 1e-6

    def test_zero_is_identity(self) -> None:
        R = axis_angle_to_rotation(torch.zeros(3, dtype=torch.float64))
        assert torch.equal(R, torch.eye(3, dtype=torch.float64))

    def test_quarter_turn_about_z(self) -> None:
        R = axis_angle_to_rotation(torch.tensor([0.0, 0.0, math.pi / 2], dtype=torch.float64))
        x = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
        assert torch.allclose(R @ x, torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64), atol=1e-12)

    def test_gradient_finite_at_origin(self) -> None:
        omega = torch.zeros(3, dtype=torch.float64, requires_grad=True)
        axis_angle_to_rotation(omega).sum().backward()
        assert torch.isfinite(omega.grad).all()

    def test_non_finite_raises(self) -> None:
        with pytest.raises(ValueError):
            axis_angle_to_rotation(torch.tensor([float("nan"), 0.0, 0.0]))

    def test_wrong_shape_raises(self) -> None:
        with pytest.raises(ValueError):
            axis_angle_to_rotation(torch.zeros(4))


class TestRigidTransform:
    """Tests for RigidTransform and pose_to_transform."""

    def test_apply_inverse_undoes_apply(self) -> None:
        pose = torch.tensor([0.3, -0.2, 0.9, 0.1, 0.2, -0.3], dtype=torch.float64)
        transform = pose_to_transform(pose)
        points = torch.randn(10, 3, dtype=torch.float64)
        assert torch.allclose(transform.apply_inverse(transform.apply(points)), points, atol=1e-12)

    def test_compose_applies_first_then_self(self) -> None:
        a = pose_to_transform(torch.tensor([0.1, 0.2, 0.3, 0.5, 0.0, 0.0], dtype=torch.float64))
        b = pose_to_transform(torch.tensor([-0.4, 0.0, 0.2, 0.0, 0.1, 0.2], dtype=torch.float64))
        points = torch.randn(5, 3, dtype=torch.float64)
        assert torch.allclose(b.compose(a).apply(points), b.apply(a.apply(points)), atol=1e-12)

    def test_pose_must_have_six_entries(self) -> None:
        with pytest.raises(ValueError):
            pose_to_transform(torch.zeros(5))


def _identity(dtype=torch.float64) -> RigidTransform:
    return RigidTransform(R=torch.eye(3, dtype=dtype), t=torch.zeros(3, dtype=dtype))


class TestAffineGridAndSampling:
    """Tests for affine_grid and trilinear_sample."""

    def test_identity_reproduces_volume(self) -> None:
        volume = torch.randn(2, 4, 5, 6, dtype=torch.float64)
        grid = affine_grid(_identity(), volume.shape[1:])
        assert grid.shape == (4, 5, 6, 3)
        assert torch.allclose(trilinear_sample(volume, grid), volume, atol=1e-10)

    def test_translation_by_one_voxel_shifts_along_width(self) -> None:
        size = 4
        volume = torch.randn(1, size, size, size, dtype=torch.float64)
        transform = RigidTransform(
            R=torch.eye(3, dtype=torch.float64),
            t=torch.tensor([2.0 / size, 0.0, 0.0], dtype=torch.float64),
        )
        moved = trilinear_sample(volume, affine_grid(transform, volume.shape[1:]))
        assert torch.allclose(moved[..., 1:], volume[..., :-1], atol=1e-10)
        assert torch.allclose(moved[..., 0], torch.zeros_like(moved[..., 0]), atol=1e-10)

    def test_out_of_range_reads_zero(self) -> None:
        volume = torch.ones(1, 3, 3, 3, dtype=torch.float64)
        far = RigidTransform(R=torch.eye(3, dtype=torch.float64),
                             t=torch.tensor([5.0, 0.0, 0.0], dtype=torch.float64))
        out = trilinear_sample(volume, affine_grid(far, (3, 3, 3)))
        assert torch.count_nonzero(out) == 0

    def test_batched_transforms(self) -> None:
        poses = torch.zeros(3, 6)
        grid = affine_grid(pose_to_transform(poses), (4, 4, 4))
        assert grid.shape == (3, 4, 4, 4, 3)

    def test_grid_size_mismatch_raises(self) -> None:
        volume = torch.zeros(1, 4, 4, 4)
        grid = affine_grid(_identity(torch.float32), (5, 5, 5))
        with pytest.raises(ValueError):
            trilinear_sample(volume, grid)

    def test_gradients_match_finite_differences(self) -> None:
        gen = torch.Generator().manual_seed(7)
        size = 3
        checked = 0
        while checked < 20:
            volume = torch.randn(1, 2, size, size, size, generator=gen, dtype=torch.float64)
            grid = (torch.rand(1, size, size, size, 3, generator=gen, dtype=torch.float64) * 2 - 1) * 0.95
            # keep clear of the lattice where trilinear weights have kinks
            pixel = ((grid + 1) * size - 1) / 2
            if ((pixel - pixel.round()).abs() < 0.01).any():
                continue
            volume.requires_grad_(True)
            grid.requires_grad_(True)
            assert torch.autograd.gradcheck(
                trilinear_sample, (volume, grid), eps=1e-4, atol=1e-8, rtol=1e-4
            )
            checked += 1


class TestZbufferComposite:
    """Tests for zbuffer_composite."""

    def _all_triples(self) -> torch.Tensor:
        triples = torch.tensor(list(itertools.product(range(3), repeat=3)), dtype=torch.float64)
        return triples.T.reshape(3, 3, 9)

    def test_composite_is_pointwise_max(self) -> None:
        stack = self._all_triples()
        composite, _ = zbuffer_composite(stack)
        assert torch.equal(composite, stack.max(dim=0).values)

    def test_labels_pick_lowest_index_among_maxima(self) -> None:
        stack = self._all_triples()
        _, labels = zbuffer_composite(stack)
        for r in range(stack.shape[1]):
            for c in range(stack.shape[2]):
                values = stack[:, r, c].tolist()
                assert labels[r, c] == values.index(max(values)) + 1

    def test_batched_stack(self) -> None:
        stack = torch.rand(2, 3, 4, 4)
        composite, labels = zbuffer_composite(stack)
        assert composite.shape == labels.shape == (2, 4, 4)

    def test_empty_stack_raises(self) -> None:
        with pytest.raises(ValueError):
            zbuffer_composite(torch.zeros(0, 4, 4))


class TestGeometryInvariants:
    """Inverse rotations, sampling composition and linearity."""

    def test_negated_axis_angle_is_transpose(self) -> None:
        omegas = torch.randn(50, 3, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
        R = axis_angle_to_rotation(omegas)
        assert torch.allclose(axis_angle_to_rotation(-omegas), R.transpose(-1, -2), atol=1e-12)

    @pytest.mark.parametrize(
        "first,second",
        [
            ([0.0, 0.0, math.pi / 2, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.5, 0.0, 0.0]),
            ([0.0, 0.0, 0.0, 0.0, -0.5, 0.0], [math.pi / 2, 0.0, 0.0, 0.0, 0.0, 0.0]),
            ([0.0, math.pi / 2, 0.0, 0.0, 0.0, 0.0], [0.0, 0.0, -math.pi / 2, 0.0, 0.0, 0.0]),
        ],
    )
    def test_sampling_twice_equals_composed_transform(self, first, second) -> None:
        # voxel-aligned motions on a 4^3 grid: quarter turns and one-voxel shifts
        volume = torch.randn(2, 4, 4, 4, generator=torch.Generator().manual_seed(3),
                             dtype=torch.float64)
        t1 = pose_to_transform(torch.tensor(first, dtype=torch.float64))
        t2 = pose_to_transform(torch.tensor(second, dtype=torch.float64))
        shape = volume.shape[1:]
        twice = trilinear_sample(trilinear_sample(volume, affine_grid(t1, shape)),
                                 affine_grid(t2, shape))
        once = trilinear_sample(volume, affine_grid(t2.compose(t1), shape))
        assert torch.allclose(twice, once, atol=1e-9)

    def test_sampling_is_linear_in_the_volume(self) -> None:
        gen = torch.Generator().manual_seed(4)
        a = torch.randn(3, 5, 5, 5, generator=gen, dtype=torch.float64)
        b = torch.randn(3, 5, 5, 5, generator=gen, dtype=torch.float64)
        grid = affine_grid(pose_to_transform(torch.tensor([0.4, -0.3, 0.2, 0.1, 0.0, -0.2],
                                                          dtype=torch.float64)), (5, 5, 5))
        combined = trilinear_sample(2.5 * a - 0.5 * b, grid)
        separate = 2.5 * trilinear_sample(a, grid) - 0.5 * trilinear_sample(b, grid)
        assert torch.allclose(combined, separate, atol=1e-10)


class TestZbufferOracle:
    """zbuffer_composite against a per-pixel loop and under instance permutation."""

    def test_random_stack_matches_loop(self) -> None:
        gen = torch.Generator().manual_seed(5)
        stack = torch.randint(0, 4, (4, 5, 6), generator=gen).to(torch.float64)
        composite, labels = zbuffer_composite(stack)
        for r in range(5):
            for c in range(6):
                values = stack[:, r, c].tolist()
                assert composite[r, c].item() == max(values)
                assert labels[r, c].item() == values.index(max(values)) + 1

    def test_permuting_instances_relabels_consistently(self) -> None:
        stack = torch.rand(5, 8, 8, generator=torch.Generator().manual_seed(6), dtype=torch.float64)
        perm = torch.tensor([3, 0, 4, 2, 1])
        composite, labels = zbuffer_composite(stack)
        composite_p, labels_p = zbuffer_composite(stack[perm])
        assert torch.equal(composite_p, composite)
        assert torch.equal(perm[labels_p - 1] + 1, labels)

    def test_full_tie_keeps_first_instance_under_permutation(self) -> None:
        stack = torch.ones(3, 4, 4)
        for perm in itertools.permutations(range(3)):
            _, labels = zbuffer_composite(stack[list(perm)])
            assert (labels == 1).all()
