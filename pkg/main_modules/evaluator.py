import logging
from dataclasses import dataclass

import numpy as np
from helper_modules.analysis_helpers import (
    EvalReport,
    acc_left_right,
    cluster_two,
    correspondence_between,
    detect_symmetry,
    err_intrinsic,
    err_matching,
    left_right_hit,
    match_shapes,
    matching_features,
)
from helper_modules.descriptor_helpers import DescriptorField, GroundTruth, load_annotations, load_descriptors, normalize
from helper_modules.errors import DegenerateFieldError, ShapeMismatchError, ValidationError
from helper_modules.mesh_helpers import TriMesh, connected_components, load_mesh
from helper_modules.refine_helpers import refine

logger = logging.getLogger(__name__)

CLUSTERINGS = ('gt', 'chi', 'refined')
FEATURES = ('agno', 'raw')

@dataclass
class ShapeRecord:

    """
    A loaded shape with its disentangled features.

    Attributes:
        name (str): Shape name.
        mesh (TriMesh): Geometry.
        field (DescriptorField): Row-normalized descriptors.
        gt (GroundTruth | None): Annotations, when available.
        chi (np.ndarray | None): Symmetry-informative channel, when a model is available.
        agno (np.ndarray | None): Symmetry-agnostic descriptors, when a model is available.
        refined (np.ndarray | None): Refined binary chirality.
    """

    name: str
    mesh: TriMesh
    field: DescriptorField
    gt: GroundTruth = None
    chi: np.ndarray = None
    agno: np.ndarray = None
    refined: np.ndarray = None

class EvaluationService:

    """
    Runs symmetry detection, left/right classification, component statistics and
    inter-shape matching over a manifest and aggregates them into an EvalReport.

    Attributes:
        config (RunConfig): Run settings (omega, match_mode, alpha and path overrides).
        model (SymmetryDisentangler | None): Trained model; chirality metrics need it.
    """

    def __init__(self, config, model=None):
        self.config = config
        self.model = model

    def load_shape(self, manifest, entry):

        """
        Loads one manifest entry and runs inference and refinement when a model is set.

        Returns:
            ShapeRecord: The loaded shape.
        """

        mesh = load_mesh(manifest.resolve(entry, 'mesh', self.config))
        field = load_descriptors(manifest.resolve(entry, 'descriptors', self.config))
        if field.num_vertices != mesh.num_vertices:
            raise ShapeMismatchError(f'{entry.name}: {field.num_vertices} descriptor rows for {mesh.num_vertices} vertices')
        annotations = manifest.resolve(entry, 'annotations', self.config)
        gt = None
        if annotations is not None and annotations.exists():
            gt = load_annotations(annotations, mesh.num_vertices)
        return self.prepare(entry.name, mesh, field, gt)

    def prepare(self, name, mesh, field, gt=None):
        record = ShapeRecord(name, mesh, normalize(field), gt)
        if self.model is not None:
            if field.dim != self.model.dim:
                raise ShapeMismatchError(f'{name}: descriptors have d={field.dim}, model has d={self.model.dim}')
            record.chi, record.agno, _, _ = self.model.disentangle(record.field)
            record.refined = refine(record.chi, mesh, self.config.omega).labels
        return record

    def _require_model(self, what):
        if self.model is None:
            raise ValidationError(f'{what} needs a checkpoint')

    def clustering(self, record, mode):

        """
        Binary labeling used to split a shape before symmetry matching.
        """

        if mode == 'gt':
            return (record.gt.lr_labels > 0).astype(np.int64)
        self._require_model(f'clustering by {mode}')
        return cluster_two(record.chi) if mode == 'chi' else record.refined

    def symmetry_features(self, record, features):
        if features == 'raw':
            return record.field.values
        self._require_model('matching on agnostic descriptors')
        return record.agno

    def match_features(self, record):
        return matching_features(self.config.match_mode, record.field.values, record.chi, record.agno,
                                 record.refined, self.config.alpha)

    def match_pair(self, source, target):

        """
        Matches two shapes with the configured feature assembly.

        Returns:
            np.ndarray: Target index per source vertex.
        """

        return match_shapes(self.match_features(source), self.match_features(target))

    def evaluate(self, manifest, cluster='chi', features='agno'):

        """
        Evaluates every shape of a manifest.

        Args:
            manifest (Manifest): The shapes.
            cluster (str): Symmetry-detection clustering: 'gt', 'chi' or 'refined'.
            features (str): Symmetry-detection matching features: 'agno' or 'raw'.

        Returns:
            EvalReport: Aggregated metrics, counts, skipped shapes and per-shape values.
        """

        if cluster not in CLUSTERINGS:
            raise ValidationError(f'unknown clustering {cluster!r}; expected one of {", ".join(CLUSTERINGS)}')
        if features not in FEATURES:
            raise ValidationError(f'unknown detection features {features!r}; expected one of {", ".join(FEATURES)}')

        report = EvalReport()
        records = [self.load_shape(manifest, entry) for entry in manifest.shapes]
        logger.info('Evaluating %d shapes (cluster=%s, features=%s, match_mode=%s)',
                    len(records), cluster, features, self.config.match_mode)

        detection_errors, detection_vertices, detection_failures = [], 0, 0
        chi_fields, refined_fields, lr_annotations = [], [], []
        components, refined_components = [], []
        for record in records:
            entry = {'name': record.name, 'vertices': record.mesh.num_vertices}
            labels = None
            if record.chi is not None:
                try:
                    labels = cluster_two(record.chi)
                except DegenerateFieldError as e:
                    entry['degenerate'] = True
                    logger.warning('%s: %s, no chirality clustering', record.name, e)
                else:
                    entry['components'] = connected_components(record.mesh, labels)
                    entry['components_refined'] = connected_components(record.mesh, record.refined)
                    components.append(entry['components'])
                    refined_components.append(entry['components_refined'])

            if record.gt is None:
                report.skipped.append({'name': record.name, 'reason': 'missing annotations'})
                logger.warning('Skipping %s metrics: missing annotations', record.name)
                report.per_shape.append(entry)
                continue

            if record.chi is not None:
                chi_fields.append(record.chi)
                refined_fields.append(record.refined)
                lr_annotations.append(record.gt.lr_labels)
                entry['hit_lr'] = left_right_hit(record.chi, record.gt.lr_labels)
                entry['hit_lr_refined'] = left_right_hit(record.refined, record.gt.lr_labels, binary=True)

            labeling = labels if cluster == 'chi' and record.chi is not None else self.clustering(record, cluster)
            if labeling is None or np.unique(labeling).size < 2:
                reason = 'degenerate chirality field' if labeling is None else 'single cluster'
                detection_failures += 1
                entry['detection_failed'] = reason
                report.skipped.append({'name': record.name, 'reason': reason})
                logger.warning('Symmetry detection failed on %s: %s', record.name, reason)
            else:
                prediction = detect_symmetry(labeling, self.symmetry_features(record, features))
                error, count = err_intrinsic(prediction, record.gt, record.mesh)
                entry['err_int'] = error
                detection_errors.append(error * count)
                detection_vertices += count
            report.per_shape.append(entry)

        if detection_vertices:
            report.metrics['err_int'] = float(sum(detection_errors) / detection_vertices)
            report.counts['err_int_vertices'] = detection_vertices
        if detection_failures:
            report.counts['detection_failures'] = detection_failures
        if chi_fields:
            report.metrics['acc_lr'] = acc_left_right(chi_fields, lr_annotations)
            report.metrics['acc_lr_refined'] = acc_left_right(refined_fields, lr_annotations, binary=True)
            report.counts['acc_lr_shapes'] = len(chi_fields)
        if components:
            report.metrics['avg_components'] = float(np.mean(components))
            report.metrics['avg_components_refined'] = float(np.mean(refined_components))
            report.counts['component_shapes'] = len(components)

        self._evaluate_matching(records, report)
        report.counts['shapes'] = len(records)
        return report

    def _evaluate_matching(self, records, report):
        pairs = [
            (source, target) for source, target in zip(records, records[1:])
            if source.gt is not None and target.gt is not None
            and source.gt.correspondence is not None and target.gt.correspondence is not None
        ]
        if not pairs:
            return
        if self.config.match_mode != 'raw':
            self._require_model(f'matching mode {self.config.match_mode}')
        errors, vertices = [], 0
        for source, target in pairs:
            prediction = self.match_pair(source, target)
            error, count = err_matching(prediction, correspondence_between(source.gt, target.gt), target.mesh)
            errors.append(error * count)
            vertices += count
            logger.debug('Matched %s -> %s: err_mat=%.6g', source.name, target.name, error)
        if vertices:
            report.metrics['err_mat'] = float(sum(errors) / vertices)
            report.counts['err_mat_pairs'] = len(pairs)
            report.counts['err_mat_vertices'] = vertices
