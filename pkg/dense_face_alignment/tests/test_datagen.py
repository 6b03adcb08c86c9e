"""
Tests for ground-truth correspondence and training-pair generation.
"""

import os
import tempfile
import unittest
from dataclasses import replace

import numpy as np

from dense_face_alignment.datagen import (
    CropPerturbation,
    PairDataset,
    UvIndex,
    compute_gt_correspondence,
    generate_dataset,
    import_fitted_image,
    list_benchmark,
    make_synthetic_pair,
    read_flow,
    write_flow,
    write_manifest,
)
from dense_face_alignment.errors import DataError
from dense_face_alignment.evalkit import read_annotation
from dense_face_alignment.facemodel import CameraPose, frontal_pose
from dense_face_alignment.fit import FitParameters
from dense_face_alignment.raster import (
    TEMPLATE_FACE_FRACTION,
    DataGenConfig,
    RenderedFace,
    rasterize,
    rasterize_attributes,
    render_target_template,
)
from dense_face_alignment.tests.fixtures import tiny_model, turned_pose


def uv_render(uv: np.ndarray, mask: np.ndarray) -> RenderedFace:
    height, width = mask.shape
    return RenderedFace(
        color=np.zeros((height, width, 3), dtype=np.uint8),
        uv_buffer=uv.astype(np.float32),
        triangle_index=np.where(mask, 0, -1).astype(np.int32),
        barycentric=np.zeros((height, width, 3), dtype=np.float32),
        depth_buffer=np.zeros((height, width), dtype=np.float32),
        face_mask=mask,
        occluder_mask=np.zeros_like(mask),
    )


class TestUvIndex(unittest.TestCase):
    """Test cases for nearest-uv lookup."""

    def setUp(self):
        """Set up test fixtures."""
        rng = np.random.default_rng(3)
        uv = rng.random((6, 7, 2))
        # a three-way tie: raster order puts (1, 2) first
        uv[4, 1] = uv[1, 2]
        uv[5, 6] = uv[1, 2]
        mask = rng.random((6, 7)) > 0.2
        mask[1, 2] = mask[4, 1] = mask[5, 6] = True
        self.render = uv_render(uv, mask)
        self.index = UvIndex(self.render)

    def linear_scan(self, query):
        rows, cols = np.nonzero(self.render.face_mask)
        stored = self.render.uv_buffer[rows, cols].astype(np.float64)
        diff = query[None, :] - stored
        sq = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1]
        best = int(np.argmin(sq))
        return np.sqrt(sq[best]), best

    def test_matches_linear_scan(self):
        """Test that lookups agree with an exhaustive scan."""
        queries = np.random.default_rng(4).random((50, 2))
        distance, nearest = self.index.query(queries)
        for q, d, n in zip(queries, distance, nearest):
            expected_d, expected_n = self.linear_scan(q)
            self.assertEqual(n, expected_n)
            self.assertEqual(d, expected_d)

    def test_tie_resolves_to_lowest_pixel(self):
        """Test that exact ties pick the lowest (y, x) pixel."""
        query = self.render.uv_buffer[1, 2].astype(np.float64)[None, :]
        distance, nearest = self.index.query(query)
        self.assertEqual(distance[0], 0.0)
        self.assertEqual(tuple(self.index.pixels[nearest[0]]), (2.0, 1.0))

    def test_tie_beyond_candidate_count(self):
        """Test that a tie shared by more pixels than the tree returns still picks the lowest pixel."""
        uv = 0.4 * np.random.default_rng(8).random((6, 6, 2))
        uv[2:, 1:4] = 0.5
        index = UvIndex(uv_render(uv, np.ones((6, 6), dtype=bool)))
        distance, nearest = index.query(np.array([[0.5, 0.5], [0.5, 0.51]]))
        self.assertEqual(distance[0], 0.0)
        self.assertAlmostEqual(distance[1], 0.01, places=9)
        for n in nearest:
            self.assertEqual(tuple(index.pixels[n]), (1.0, 2.0))

    def test_empty_target(self):
        """Test that an empty target mask cannot be indexed."""
        with self.assertRaises(DataError):
            UvIndex(uv_render(np.zeros((4, 4, 2)), np.zeros((4, 4), dtype=bool)))


class TestGroundTruthCorrespondence(unittest.TestCase):
    """Test cases for dense ground-truth flow."""

    def setUp(self):
        """Set up test fixtures."""
        self.model = tiny_model()
        self.size = (32, 32)
        self.render = rasterize_attributes(self.model, self.model.zero_coefficients(),
                                           turned_pose(self.model, self.size, 0.3), self.size)

    def test_self_flow_is_zero(self):
        """Test that a render matched against itself has zero flow on its whole face."""
        flow, mask = compute_gt_correspondence(self.render, self.render)
        np.testing.assert_array_equal(mask.astype(bool), self.render.face_mask)
        np.testing.assert_array_equal(flow, 0.0)

    def test_matches_respect_threshold(self):
        """Test that every matched pixel lands on a target pixel within the uv threshold."""
        target = render_target_template(self.model, self.size)
        flow, mask = compute_gt_correspondence(self.render, target, uv_threshold=0.015)
        rows, cols = np.nonzero(mask)
        self.assertGreater(len(rows), 0)
        tx = (cols + flow[rows, cols, 0]).astype(np.int64)
        ty = (rows + flow[rows, cols, 1]).astype(np.int64)
        self.assertTrue(target.face_mask[ty, tx].all())
        gap = np.linalg.norm(self.render.uv_buffer[rows, cols] - target.uv_buffer[ty, tx], axis=1)
        self.assertTrue(np.all(gap < 0.015 + 1e-6))
        self.assertFalse(mask[~self.render.face_mask].any())

    def test_integer_shift_gives_constant_flow(self):
        """Test that a render shifted by whole pixels flows back by exactly that shift."""
        pose = frontal_pose(self.model, self.size, TEMPLATE_FACE_FRACTION)
        target = rasterize_attributes(self.model, self.model.zero_coefficients(), pose, self.size)
        shift = np.array([[1.0, 0.0, 3.0], [0.0, 1.0, -2.0]])
        source = rasterize_attributes(self.model, self.model.zero_coefficients(), pose, self.size, shift)
        flow, mask = compute_gt_correspondence(source, target)
        rows, cols = np.nonzero(source.face_mask)
        inside = (rows + 2 < self.size[1]) & (cols - 3 >= 0)
        counterpart = np.zeros_like(rows, dtype=bool)
        counterpart[inside] = target.face_mask[rows[inside] + 2, cols[inside] - 3]
        rows, cols = rows[counterpart], cols[counterpart]
        self.assertGreater(len(rows), 100)
        self.assertTrue(mask[rows, cols].all())
        np.testing.assert_array_equal(flow[rows, cols], np.tile([-3.0, 2.0], (len(rows), 1)))

    def test_larger_threshold_grows_the_mask(self):
        """Test that raising the uv threshold only adds matched pixels and keeps existing matches."""
        target = render_target_template(self.model, self.size)
        previous_flow, previous_mask = None, None
        counts = []
        for threshold in (0.002, 0.005, 0.015, 0.05):
            flow, mask = compute_gt_correspondence(self.render, target, uv_threshold=threshold)
            mask = mask.astype(bool)
            if previous_mask is not None:
                self.assertFalse((previous_mask & ~mask).any(), threshold)
                np.testing.assert_array_equal(flow[previous_mask], previous_flow[previous_mask])
            previous_flow, previous_mask = flow, mask
            counts.append(int(mask.sum()))
        self.assertLess(counts[0], counts[-1])

    def test_size_mismatch(self):
        """Test that renders of different sizes are rejected."""
        other = render_target_template(self.model, (40, 40))
        with self.assertRaises(ValueError):
            compute_gt_correspondence(self.render, other)


class TestSyntheticPairs(unittest.TestCase):
    """Test cases for synthetic training pairs."""

    def setUp(self):
        """Set up test fixtures."""
        self.model = tiny_model()
        self.config = DataGenConfig(image_size=32, count=2, seed=11, p_occ=0.5)

    def test_deterministic(self):
        """Test that a pair depends only on seed and index."""
        a = make_synthetic_pair(self.model, self.config, 1)
        b = make_synthetic_pair(self.model, self.config, 1)
        np.testing.assert_array_equal(a.source, b.source)
        np.testing.assert_array_equal(a.target, b.target)
        np.testing.assert_array_equal(a.gt_flow, b.gt_flow)
        np.testing.assert_array_equal(a.gt_mask, b.gt_mask)

    def test_pretrain_flow_follows_scenes(self):
        """Test that pre-training flow agrees with flow recomputed from the recorded scenes."""
        pair = make_synthetic_pair(self.model, self.config, 0)
        source = rasterize(self.model, pair.meta["source_scene"], self.config.size)
        target = rasterize(self.model, pair.meta["target_scene"], self.config.size)
        flow, mask = compute_gt_correspondence(source, target, self.config.uv_threshold)
        np.testing.assert_array_equal(pair.gt_flow, flow)
        np.testing.assert_array_equal(pair.source, source.color)

    def test_finetune_target_is_template(self):
        """Test that fine-tuning pairs always target the frontal template."""
        config = replace(self.config, stage="finetune")
        template = render_target_template(self.model, config.size)
        for index in range(2):
            pair = make_synthetic_pair(self.model, config, index)
            np.testing.assert_array_equal(pair.target, template.color)

    def test_pair_planes_must_agree(self):
        """Test that a pair with mismatched planes is rejected."""
        pair = make_synthetic_pair(self.model, self.config, 0)
        with self.assertRaises(ValueError):
            replace(pair, gt_mask=pair.gt_mask[:-1])


class TestDatasetFiles(unittest.TestCase):
    """Test cases for dataset directories and flow files."""

    def setUp(self):
        """Set up test fixtures."""
        self.model = tiny_model()
        self.config = DataGenConfig(image_size=32, count=2, seed=5)
        self.tmp = tempfile.TemporaryDirectory()
        self.root = self.tmp.name

    def tearDown(self):
        """Clean up test fixtures."""
        self.tmp.cleanup()

    def test_generate_and_load(self):
        """Test that generated pairs load back exactly through the manifest."""
        written = generate_dataset(self.model, self.config, self.root)
        self.assertEqual(written, 2)
        dataset = PairDataset(self.root)
        self.assertEqual(len(dataset), 2)
        expected = make_synthetic_pair(self.model, self.config, 1)
        loaded = dataset[1]
        np.testing.assert_array_equal(loaded.source, expected.source)
        np.testing.assert_array_equal(loaded.target, expected.target)
        np.testing.assert_array_equal(loaded.gt_flow, expected.gt_flow)
        np.testing.assert_array_equal(loaded.gt_mask, expected.gt_mask)
        self.assertEqual(loaded.provenance, "synthetic")

    def test_resume_skips_complete_pairs(self):
        """Test that a second run finds every pair complete."""
        generate_dataset(self.model, self.config, self.root)
        self.assertEqual(generate_dataset(self.model, self.config, self.root), 0)

    def test_thread_count_does_not_change_output(self):
        """Test that pooled generation writes the same bytes as serial generation."""
        generate_dataset(self.model, self.config, self.root, threads=1)
        with tempfile.TemporaryDirectory() as other:
            generate_dataset(self.model, self.config, other, threads=2)
            for index in range(2):
                name = os.path.join("pairs", f"{index:06d}", "gt.dcfl")
                with open(os.path.join(self.root, name), "rb") as a, open(os.path.join(other, name), "rb") as b:
                    self.assertEqual(a.read(), b.read())

    def test_missing_and_malformed_manifest(self):
        """Test that dataset problems are data errors naming the manifest."""
        with self.assertRaises(DataError) as ctx:
            PairDataset(self.root)
        self.assertIn("manifest", str(ctx.exception))
        with open(os.path.join(self.root, "manifest.txt"), "w", encoding="utf-8") as f:
            f.write("zero synthetic\n")
        with self.assertRaises(DataError):
            PairDataset(self.root)
        write_manifest(self.root, [])
        with self.assertRaises(DataError):
            PairDataset(self.root)

    def test_flow_file(self):
        """Test that flow files keep the flow exactly and reject truncation."""
        flow = np.random.default_rng(0).normal(size=(5, 7, 2)).astype(np.float32)
        mask = np.zeros((5, 7), dtype=np.float32)
        mask[1:3] = 1.0
        path = os.path.join(self.root, "gt.dcfl")
        write_flow(path, flow, mask)
        loaded_flow, loaded_mask = read_flow(path)
        np.testing.assert_array_equal(loaded_flow, flow)
        np.testing.assert_array_equal(loaded_mask, mask)
        with open(path, "rb") as f:
            payload = f.read()
        with open(path, "wb") as f:
            f.write(payload[:-3])
        with self.assertRaises(DataError):
            read_flow(path)
        with self.assertRaises(DataError):
            read_flow(os.path.join(self.root, "absent.dcfl"))

    def test_benchmark_items(self):
        """Test that benchmark generation writes annotated images listed in index order."""
        config = replace(self.config, stage="benchmark")
        generate_dataset(self.model, config, self.root)
        self.assertEqual(list_benchmark(self.root), [0, 1])
        annotation = read_annotation(os.path.join(self.root, "bench", "000001", "annotation.json"))
        self.assertEqual(len(annotation.points), 68)
        self.assertIsNotNone(annotation.yaw)

    def test_empty_benchmark(self):
        """Test that a directory without benchmark items is a data error."""
        with self.assertRaises(DataError):
            list_benchmark(self.root)


class TestImportedImages(unittest.TestCase):
    """Test cases for fine-tuning pairs built from fitted photographs."""

    def setUp(self):
        """Set up test fixtures."""
        self.model = tiny_model()
        self.size = (32, 32)
        self.image = np.full((32, 32, 3), 90, dtype=np.uint8)
        pose = frontal_pose(self.model, self.size, TEMPLATE_FACE_FRACTION)
        self.fit = FitParameters(pose, self.model.zero_coefficients())

    def test_template_fit_has_zero_flow(self):
        """Test that a photograph fitted exactly by the template maps onto itself."""
        pair = import_fitted_image(self.image, self.fit, self.model)
        template = render_target_template(self.model, self.size)
        np.testing.assert_array_equal(pair.gt_mask.astype(bool), template.face_mask)
        np.testing.assert_array_equal(pair.gt_flow, 0.0)
        np.testing.assert_array_equal(pair.source, self.image)
        self.assertEqual(pair.provenance, "imported")

    def test_outside_crop(self):
        """Test that a fit projecting past the right edge is rejected naming that bound."""
        pose = self.fit.pose
        shifted = CameraPose(pose.f, pose.rotation, pose.translation + np.array([5.0, 0.0, 0.0]))
        with self.assertRaises(DataError) as ctx:
            import_fitted_image(self.image, FitParameters(shifted, self.fit.coeffs), self.model)
        self.assertIn("right bound", str(ctx.exception))

    def test_identity_perturbation(self):
        """Test that the neutral crop perturbation is the identity map."""
        np.testing.assert_allclose(CropPerturbation().matrix(self.size), [[1, 0, 0], [0, 1, 0]], atol=1e-12)
        shifted = CropPerturbation(shift_x=3.0, shift_y=-2.0).matrix(self.size)
        np.testing.assert_allclose(shifted @ [16.0, 16.0, 1.0], [19.0, 14.0], atol=1e-9)

    def test_perturbed_crop_stays_inside_both_faces(self):
        """Test that matches of a perturbed import start on the warped face and end on the template face."""
        perturbation = CropPerturbation(scale=0.95, shift_x=2.0, shift_y=-1.0, rotation=0.1)
        pair = import_fitted_image(self.image, self.fit, self.model, uv_threshold=0.05, perturbation=perturbation)
        warped = rasterize_attributes(self.model, self.fit.coeffs, self.fit.pose, self.size,
                                      perturbation.matrix(self.size))
        template = render_target_template(self.model, self.size)
        matched = pair.gt_mask.astype(bool)
        self.assertGreater(int(matched.sum()), 0.9 * int(warped.face_mask.sum()))
        self.assertFalse((matched & ~warped.face_mask).any())
        rows, cols = np.nonzero(matched)
        tx = (cols + pair.gt_flow[rows, cols, 0]).astype(np.int64)
        ty = (rows + pair.gt_flow[rows, cols, 1]).astype(np.int64)
        self.assertTrue(np.all((tx >= 0) & (tx < 32) & (ty >= 0) & (ty < 32)))
        self.assertTrue(template.face_mask[ty, tx].all())

    def test_perturbation_past_the_crop(self):
        """Test that a perturbation pushing the face off the image is rejected."""
        with self.assertRaises(DataError) as ctx:
            import_fitted_image(self.image, self.fit, self.model, perturbation=CropPerturbation(shift_x=12.0))
        self.assertIn("right bound", str(ctx.exception))


if __name__ == "__main__":
    unittest.main()
