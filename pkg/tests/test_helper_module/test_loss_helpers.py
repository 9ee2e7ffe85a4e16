import math
import os
import sys
import unittest
import warnings

import numpy as np
import torch
from torch.autograd import gradcheck
from torch.func import functional_call
from helper_modules.errors import ShapeMismatchError, ValidationError
from helper_modules.loss_helpers import (
    BoundaryTuples,
    LossWeights,
    compute_losses,
    consistency_from_assignments,
    loss_bou,
    loss_con,
    loss_dis,
    loss_rec,
    loss_sim,
    loss_total,
    sample_vertices,
    soft_assignment,
)
from helper_modules.mesh_helpers import TriMesh, tangential_cosine
from helper_modules.numkernel import DTYPE

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), os.path.pardir)))

from fixtures import flat_grid, random_field, random_grid_mesh, random_model

def as_tensor(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))

def unit_rows(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)

def boundary_oracle(mesh, chi):

    """
    Exhaustive enumeration of all (u, v, w) tuples with scalar tangential cosines.
    """

    total = 0.0
    for v in range(mesh.num_vertices):
        scores = [
            (chi[u] - chi[v]) ** 2 + (chi[v] - chi[w]) ** 2 - tangential_cosine(mesh, u, v, w)
            for u in mesh.neighbors[v] for w in mesh.neighbors[v]
        ]
        total += min(scores) if scores else 0.0
    return total / mesh.num_vertices

def consistency_branch_oracle(chi, agno, eps=1e-12):
    m = len(chi)
    w = np.zeros((m, m))
    c = np.zeros((m, m))
    for i in range(m):
        for j in range(m):
            w[i, j] = (chi[i] - chi[j]) ** 2
            c[i, j] = sum(agno[i, k] * agno[j, k] for k in range(agno.shape[1]))
    w = (w - w.min()) / (w.max() - w.min() + eps)
    c = (c - c.min()) / (c.max() - c.min() + eps)
    pi = w * c
    return np.eye(m) - pi @ pi

class TestLossHelperFunctions(unittest.TestCase):

    def setUp(self):

        """
        Creates a random generator shared by the oracle tests.
        """

        self.rng = np.random.default_rng(11)

    def test_loss_dis(self):

        """
        Test L_dis on identical inputs, the single-vertex case and random fixtures.
        """

        x = as_tensor([0.3, -0.2, 0.9])
        self.assertEqual(float(loss_dis(x, x)), 0.0)
        self.assertAlmostEqual(float(loss_dis(as_tensor([1.0]), as_tensor([-1.0]))), -2.0, places=15)
        for _ in range(50):
            a, b = self.rng.uniform(-1, 1, 4), self.rng.uniform(-1, 1, 4)
            expected = -math.sqrt(sum((a - b) ** 2)) / math.sqrt(4)
            self.assertLess(abs(float(loss_dis(as_tensor(a), as_tensor(b))) - expected), 1e-12)
            self.assertLessEqual(float(loss_dis(as_tensor(a), as_tensor(b))), 0.0)
        with self.assertRaises(ShapeMismatchError):
            loss_dis(as_tensor([1.0, 2.0]), as_tensor([1.0]))

    def test_loss_sim_and_rec(self):

        """
        Test L_sim and L_rec on hand-computed values and random fixtures.
        """

        self.assertAlmostEqual(float(loss_sim(as_tensor([[1.0, 0.0]]), as_tensor([[0.0, 1.0]]))), math.sqrt(2.0), places=15)
        self.assertEqual(float(loss_rec(as_tensor([[1.0, 2.0]]), as_tensor([[1.0, 2.0]]))), 0.0)
        self.assertAlmostEqual(float(loss_rec(as_tensor([[1.0, 2.0, 2.0]]), as_tensor([[0.0, 0.0, 0.0]]))), 3.0, places=15)
        for _ in range(50):
            a, b = self.rng.standard_normal((6, 7)), self.rng.standard_normal((6, 7))
            expected = math.sqrt(float(np.sum((a - b) ** 2))) / math.sqrt(6)
            self.assertLess(abs(float(loss_sim(as_tensor(a), as_tensor(b))) - expected), 1e-12)
            self.assertLess(abs(float(loss_rec(as_tensor(a), as_tensor(b))) - expected), 1e-12)

    def test_loss_bou_against_enumeration(self):

        """
        Test the boundary loss against exhaustive tuple enumeration on random meshes.
        """

        for _ in range(50):
            mesh = random_grid_mesh(self.rng, max_vertices=8)
            tuples = BoundaryTuples.from_mesh(mesh)
            chi, chi_flipped = self.rng.uniform(-1, 1, mesh.num_vertices), self.rng.uniform(-1, 1, mesh.num_vertices)
            expected = boundary_oracle(mesh, chi) + boundary_oracle(mesh, chi_flipped)
            value = float(loss_bou(tuples, as_tensor(chi), as_tensor(chi_flipped)))
            self.assertLess(abs(value - expected), 1e-12)

    def test_loss_bou_constant_chi(self):

        """
        Test that constant chirality reduces the boundary loss to minus twice the mean best cosine,
        and that the straight-through centre vertex of a flat grid scores cosine 1.
        """

        mesh = flat_grid(3, 3)
        tuples = BoundaryTuples.from_mesh(mesh)
        chi = torch.full((9,), 0.4, dtype=DTYPE)
        best = [max(tangential_cosine(mesh, u, v, w) for u in mesh.neighbors[v] for w in mesh.neighbors[v]) for v in range(9)]
        self.assertAlmostEqual(best[4], 1.0, places=12)
        self.assertAlmostEqual(float(loss_bou(tuples, chi, chi)), -2.0 * sum(best) / 9, places=12)

    def test_loss_bou_isolated_vertex(self):

        """
        Test that a vertex without tuples contributes 0 but stays in the average.
        """

        mesh = TriMesh([(0, 0, 0), (1, 0, 0), (0, 1, 0), (4, 4, 4)], [(0, 1, 2)])
        tuples = BoundaryTuples.from_mesh(mesh)
        chi = as_tensor([0.1, 0.5, -0.3, 0.9])
        expected = 2 * boundary_oracle(mesh, chi.numpy())
        self.assertAlmostEqual(float(loss_bou(tuples, chi, chi)), expected, places=12)
        with self.assertRaises(ShapeMismatchError):
            loss_bou(tuples, chi[:3], chi[:3])

    def test_consistency_injected_assignments(self):

        """
        Test that an identity or an involutive permutation assignment gives zero loss.
        """

        identity = torch.eye(4, dtype=DTYPE)
        swap = identity[[1, 0, 3, 2]]
        self.assertEqual(float(consistency_from_assignments(identity, identity)), 0.0)
        self.assertEqual(float(consistency_from_assignments(swap, identity)), 0.0)
        self.assertGreater(float(consistency_from_assignments(identity, torch.zeros(4, 4, dtype=DTYPE))), 0.0)

    def test_consistency_intermediates(self):

        """
        Test the structure of W, C_c and Pi.
        """

        chi = as_tensor(self.rng.uniform(-1, 1, 5))
        agno = as_tensor(unit_rows(self.rng.standard_normal((5, 3))))
        parts = soft_assignment(chi, agno)
        self.assertTrue(torch.equal(parts.w, parts.w.T))
        self.assertTrue(torch.equal(torch.diagonal(parts.w), torch.zeros(5, dtype=DTYPE)))
        self.assertTrue(torch.allclose(torch.diagonal(parts.similarity), torch.ones(5, dtype=DTYPE)))
        self.assertTrue(bool(((parts.assignment >= 0) & (parts.assignment <= 1)).all()))

    def test_loss_con_against_oracle(self):

        """
        Test the consistency loss against a loop-based reimplementation.
        """

        for _ in range(50):
            n = 6
            chi, chi_flipped = self.rng.uniform(-1, 1, n), self.rng.uniform(-1, 1, n)
            agno, agno_flipped = unit_rows(self.rng.standard_normal((n, 4))), unit_rows(self.rng.standard_normal((n, 4)))
            sample = np.sort(self.rng.choice(n, size=3, replace=False))
            residual = np.concatenate([
                consistency_branch_oracle(chi[sample], agno[sample]),
                consistency_branch_oracle(chi_flipped[sample], agno_flipped[sample]),
            ], axis=1)
            expected = math.sqrt(float(np.sum(residual ** 2))) / 3
            value = float(loss_con(as_tensor(chi), as_tensor(agno), as_tensor(chi_flipped), as_tensor(agno_flipped), torch.from_numpy(sample)))
            self.assertLess(abs(value - expected), 1e-12)
            self.assertGreaterEqual(value, 0.0)

    def test_loss_con_sample_validation(self):

        """
        Test rejection of duplicate, empty and out-of-range samples.
        """

        chi = as_tensor([0.1, 0.2, 0.3])
        agno = as_tensor(np.eye(3))
        for sample in ([0, 0, 1], [], [0, 3]):
            with self.assertRaises(ValidationError):
                loss_con(chi, agno, chi, agno, torch.tensor(sample, dtype=torch.long))

    def test_sample_vertices(self):

        """
        Test that samples are distinct, sorted, bounded by |V| and reproducible.
        """

        sample = sample_vertices(1000, 512, torch.Generator().manual_seed(0))
        self.assertEqual(sample.numel(), 512)
        self.assertEqual(torch.unique(sample).numel(), 512)
        self.assertTrue(torch.equal(sample, torch.sort(sample).values))
        self.assertTrue(torch.equal(sample, sample_vertices(1000, 512, torch.Generator().manual_seed(0))))
        self.assertTrue(torch.equal(sample_vertices(5, 512, torch.Generator().manual_seed(0)), torch.arange(5)))

    def test_loss_total(self):

        """
        Test the weighted total with default weights, zero components and ablation weights.
        """

        names = ('dis', 'sim', 'rec', 'bou', 'con')
        components = dict(zip(names, (-1.0, 1.0, 1.0, 1.0, 1.0)))
        self.assertAlmostEqual(loss_total(components, LossWeights()), 12.2, places=12)
        self.assertEqual(loss_total(dict.fromkeys(names, 0.0), LossWeights()), 0.0)
        self.assertAlmostEqual(loss_total(components, LossWeights(sim=0.0, rec=0.2, bou=10.0, con=2.0)), 11.2, places=12)
        with self.assertRaises(ValidationError):
            loss_total(dict(components, con=float('nan')), LossWeights())
        with self.assertRaises(ValidationError):
            LossWeights(sim=-1.0)

    def test_loss_total_on_graph_tensors(self):

        """
        Test that tensors recorded for backward pass the finiteness check silently and keep their graph.
        """

        leaf = torch.tensor(0.5, dtype=DTYPE, requires_grad=True)
        components = {'dis': -2.0 * leaf, 'sim': leaf, 'rec': leaf * leaf, 'bou': 3.0 * leaf, 'con': leaf + 1.0}
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter('always')
            total = loss_total(components, LossWeights())
        self.assertEqual(caught, [])
        self.assertTrue(total.requires_grad)
        # -1 + 0.5 + 0.2 * 0.25 + 10 * 1.5 + 2 * 1.5
        self.assertAlmostEqual(total.item(), 17.55, places=12)

        with self.assertRaises(ValidationError):
            loss_total(dict(components, bou=leaf / 0.0), LossWeights())

class TestLossGradients(unittest.TestCase):

    def setUp(self):

        """
        Builds ten random 6-vertex fixtures with d = 8 and large random model weights.
        """

        rng = np.random.default_rng(5)
        self.fixtures = []
        for seed in range(10):
            mesh = flat_grid(3, 2, jitter=0.2, rng=rng)
            field = random_field(rng, 6, 8)
            model = random_model(8, seed)
            sample = torch.from_numpy(np.sort(rng.choice(6, size=4, replace=False)))
            self.fixtures.append((mesh, field, model, sample))

    def loss_function(self, mesh, field, model, sample, name):
        values, flipped = torch.from_numpy(field.values), torch.from_numpy(field.flipped)
        stack = torch.cat([values, flipped], dim=1)
        tuples = BoundaryTuples.from_mesh(mesh)
        names = [n for n, _ in model.named_parameters()]

        def evaluate(*tensors):
            output = functional_call(model, dict(zip(names, tensors)), (values, flipped))
            return compute_losses(output, stack, tuples, sample, LossWeights())[name]
        return evaluate

    def test_gradients_match_finite_differences(self):

        """
        Test analytic parameter gradients of every loss and the total against central differences.
        """

        for mesh, field, model, sample in self.fixtures:
            inputs = tuple(p.detach().clone().requires_grad_(True) for p in model.parameters())
            for name in ('dis', 'sim', 'rec', 'bou', 'con', 'total'):
                function = self.loss_function(mesh, field, model, sample, name)
                self.assertTrue(gradcheck(function, inputs, eps=1e-5, atol=1e-5, rtol=1e-4, fast_mode=True), name)

    def test_total_gradient_full_jacobian(self):

        """
        Test the full gradient of the total loss on one fixture, entry by entry.
        """

        mesh, field, model, sample = self.fixtures[0]
        inputs = tuple(p.detach().clone().requires_grad_(True) for p in model.parameters())
        function = self.loss_function(mesh, field, model, sample, 'total')
        self.assertTrue(gradcheck(function, inputs, eps=1e-5, atol=1e-5, rtol=1e-4))

if __name__ == '__main__':
    unittest.main()
