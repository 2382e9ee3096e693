import logging
from typing import Optional, Tuple

import numpy as np

from src.models.data_models import (
    CameraIntrinsics, CameraPose, GaussianMap, PixelContributors, ProcessingError,
    ProjectedGaussians, RenderedFrame, RenderGradients
)
from src.components.pose_utils import quaternion_matrix_gradient, quaternion_to_matrix, vee

logger = logging.getLogger(__name__)

# Weight channels accepted by render_with_gradients: r, g, b, depth
WEIGHT_CHANNELS = 4


class SplatRenderer:
    """Differentiable front-to-back Gaussian splatting on the CPU.

    Pixel (u, v) has its centre at integer coordinates (u, v). Projected
    Gaussians are binned into square tiles; the per-pixel result does not
    depend on the tile size.
    """

    def __init__(self, near_plane: float = 0.01, cov_regularization: float = 0.3,
                 alpha_clamp: float = 0.99, transmittance_cutoff: float = 1e-4,
                 tile_size: int = 16, footprint_sigmas: float = 3.0):
        self.near_plane = near_plane
        self.cov_regularization = cov_regularization
        self.alpha_clamp = alpha_clamp
        self.transmittance_cutoff = transmittance_cutoff
        self.tile_size = max(1, int(tile_size))
        self.footprint_sigmas = footprint_sigmas

    # ------------------------------------------------------------------ forward

    def project(self, gaussian_map: GaussianMap, pose: CameraPose,
                intrinsics: CameraIntrinsics) -> ProjectedGaussians:
        """Camera-space means, EWA 2D covariances and footprint radii of the primitives past the near plane."""
        camera_points = gaussian_map.means @ pose.rotation.T + pose.translation
        keep = np.nonzero(camera_points[:, 2] > self.near_plane)[0]
        camera_points = camera_points[keep]
        x, y, z = camera_points[:, 0], camera_points[:, 1], camera_points[:, 2]

        rotations = quaternion_to_matrix(gaussian_map.rotations[keep]) if len(keep) else np.zeros((0, 3, 3))
        scaled_axes = rotations * gaussian_map.scales[keep][:, None, :]
        cov3d = scaled_axes @ np.transpose(scaled_axes, (0, 2, 1))

        jacobians = np.zeros((len(keep), 2, 3))
        jacobians[:, 0, 0] = intrinsics.fx / z
        jacobians[:, 0, 2] = -intrinsics.fx * x / (z * z)
        jacobians[:, 1, 1] = intrinsics.fy / z
        jacobians[:, 1, 2] = -intrinsics.fy * y / (z * z)

        jw = jacobians @ pose.rotation
        cov2d = jw @ cov3d @ np.transpose(jw, (0, 2, 1))
        cov2d = 0.5 * (cov2d + np.transpose(cov2d, (0, 2, 1)))
        cov2d[:, 0, 0] += self.cov_regularization
        cov2d[:, 1, 1] += self.cov_regularization

        means2d = np.stack([intrinsics.fx * x / z + intrinsics.cx,
                            intrinsics.fy * y / z + intrinsics.cy], axis=1)

        if not (np.all(np.isfinite(cov2d)) and np.all(np.isfinite(means2d))):
            bad = keep[~(np.all(np.isfinite(cov2d.reshape(-1, 4)), axis=1)
                         & np.all(np.isfinite(means2d), axis=1))]
            raise ProcessingError(f"Non-finite projection for primitive(s) {bad[:5].tolist()}", "NumericsError")

        det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
        if np.any(det <= 0):
            bad = keep[det <= 0]
            raise ProcessingError(f"Singular 2D covariance for primitive {int(bad[0])}", "NumericsError")
        conics = np.empty_like(cov2d)
        conics[:, 0, 0] = cov2d[:, 1, 1] / det
        conics[:, 1, 1] = cov2d[:, 0, 0] / det
        conics[:, 0, 1] = -cov2d[:, 0, 1] / det
        conics[:, 1, 0] = -cov2d[:, 1, 0] / det

        mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
        lambda_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
        radii = np.ceil(self.footprint_sigmas * np.sqrt(lambda_max))

        return ProjectedGaussians(
            means2d=means2d, cov2d=cov2d, conics=conics, camera_points=camera_points,
            jacobians=jacobians, cov3d=cov3d, radii=radii, source_index=keep,
            object_ids=gaussian_map.object_ids[keep],
        )

    def rasterize(self, projected: ProjectedGaussians, gaussian_map: GaussianMap,
                  intrinsics: CameraIntrinsics) -> RenderedFrame:
        height, width = intrinsics.height, intrinsics.width
        color = np.zeros((height * width, 3))
        alpha = np.zeros(height * width)
        depth = np.zeros(height * width)

        pairs = self._footprint_pairs(projected, width, height)
        if pairs is None:
            return RenderedFrame(color.reshape(height, width, 3), depth.reshape(height, width),
                                 alpha.reshape(height, width), None, projected)
        entry, pixel = pairs
        order = np.argsort(self._pair_keys(projected, entry, pixel, width, height))
        entry, pixel = entry[order], pixel[order]

        starts = np.concatenate([[0], np.nonzero(pixel[1:] != pixel[:-1])[0] + 1])
        counts = np.diff(np.append(starts, len(pixel)))
        pixel_index = pixel[starts]
        row = np.repeat(np.arange(len(starts)), counts)
        rank = np.arange(len(pixel)) - starts[row]
        sources = projected.source_index[entry]

        pixel_xy = np.stack([pixel % width, pixel // width], axis=1).astype(np.float64)
        offsets = pixel_xy - projected.means2d[entry]
        falloff = self._falloff(projected.conics[entry], offsets)
        raw_alpha = gaussian_map.opacities[sources] * falloff
        layer_alpha = np.clip(raw_alpha, 0.0, self.alpha_clamp)

        # exclusive product of (1 - alpha) over the layers in front
        factors = np.ones((len(starts), int(counts.max()) + 1))
        factors[row, rank + 1] = 1.0 - layer_alpha
        transmittance = np.cumprod(factors, axis=1)[row, rank]
        weight = np.where(transmittance >= self.transmittance_cutoff, layer_alpha * transmittance, 0.0)

        # bincount sums each pixel's pairs in front-to-back order, independent of tiling
        n_pixels = len(starts)
        entry_colors = gaussian_map.colors[sources]
        for channel in range(3):
            color[pixel_index, channel] = np.bincount(row, weights=weight * entry_colors[:, channel],
                                                      minlength=n_pixels)
        alpha[pixel_index] = np.bincount(row, weights=weight, minlength=n_pixels)
        depth_sum = np.bincount(row, weights=weight * projected.camera_depth[entry], minlength=n_pixels)
        covered = alpha[pixel_index] > 0
        depth[pixel_index[covered]] = depth_sum[covered] / alpha[pixel_index[covered]]

        contributors = PixelContributors(
            pixel_index=pixel_index, row=row, rank=rank, entry=entry, alpha=layer_alpha, raw_alpha=raw_alpha,
            falloff=falloff, transmittance=transmittance, weight=weight, offsets=offsets,
        )
        return RenderedFrame(color.reshape(height, width, 3), depth.reshape(height, width),
                             np.clip(alpha, 0.0, 1.0).reshape(height, width), contributors, projected)

    def render(self, gaussian_map: GaussianMap, pose: CameraPose,
               intrinsics: CameraIntrinsics) -> RenderedFrame:
        """Projects and composites `gaussian_map` as seen from the world-to-camera `pose`."""
        return self.rasterize(self.project(gaussian_map, pose, intrinsics), gaussian_map, intrinsics)

    def _pair_keys(self, projected: ProjectedGaussians, entry: np.ndarray, pixel: np.ndarray,
                   width: int, height: int) -> np.ndarray:
        """One int64 sort key per pair: tile-major pixel order, then depth, then source index."""
        tiles_x = -(-width // self.tile_size)
        all_y, all_x = np.divmod(np.arange(height * width), width)
        tile_of_pixel = (all_y // self.tile_size) * tiles_x + all_x // self.tile_size
        pixel_rank = np.empty(height * width, dtype=np.int64)
        pixel_rank[np.argsort(tile_of_pixel, kind="stable")] = np.arange(height * width)

        depth_rank = np.empty(len(projected), dtype=np.int64)
        depth_rank[np.lexsort((projected.source_index, projected.camera_depth))] = np.arange(len(projected))
        return pixel_rank[pixel] * len(projected) + depth_rank[entry]

    def _footprint_pairs(self, projected: ProjectedGaussians, width: int, height: int):
        if len(projected) == 0:
            return None
        centre, radius = projected.means2d, projected.radii
        x_min = np.maximum(0, np.ceil(centre[:, 0] - radius)).astype(np.int64)
        x_max = np.minimum(width - 1, np.floor(centre[:, 0] + radius)).astype(np.int64)
        y_min = np.maximum(0, np.ceil(centre[:, 1] - radius)).astype(np.int64)
        y_max = np.minimum(height - 1, np.floor(centre[:, 1] + radius)).astype(np.int64)
        span_x = np.maximum(0, x_max - x_min + 1)
        span_y = np.maximum(0, y_max - y_min + 1)
        counts = span_x * span_y
        total = int(counts.sum())
        if total == 0:
            return None

        entry = np.repeat(np.arange(len(projected)), counts)
        local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        local_y, local_x = np.divmod(local, span_x[entry])
        pixel = (y_min[entry] + local_y) * width + (x_min[entry] + local_x)
        return entry, pixel

    @staticmethod
    def _falloff(conics: np.ndarray, offsets: np.ndarray) -> np.ndarray:
        dx, dy = offsets[..., 0], offsets[..., 1]
        power = conics[..., 0, 0] * dx * dx + 2.0 * conics[..., 0, 1] * dx * dy + conics[..., 1, 1] * dy * dy
        return np.exp(-0.5 * power)

    def visibility(self, gaussian_map: GaussianMap, pose: CameraPose, intrinsics: CameraIntrinsics,
                   alpha_threshold: float = 1e-3) -> np.ndarray:
        """Indices of primitives whose summed compositing weight exceeds `alpha_threshold`."""
        rendered = self.render(gaussian_map, pose, intrinsics)
        return self.visible_indices(rendered, len(gaussian_map), alpha_threshold)

    @staticmethod
    def visible_indices(rendered: RenderedFrame, map_size: int, alpha_threshold: float = 1e-3) -> np.ndarray:
        contributors = rendered.per_pixel_contributors
        if contributors is None:
            return np.zeros(0, dtype=np.int64)
        sources = rendered.projected.source_index[contributors.entry]
        totals = np.bincount(sources, weights=contributors.weight, minlength=map_size)
        return np.nonzero(totals > alpha_threshold)[0]

    @staticmethod
    def partial_alpha(rendered: RenderedFrame, include: Optional[np.ndarray] = None) -> np.ndarray:
        """H x W compositing weight contributed by the primitives flagged in `include` (all when None)."""
        if include is None:
            return rendered.alpha
        alpha = np.zeros(rendered.alpha.size)
        contributors = rendered.per_pixel_contributors
        if contributors is None:
            return alpha.reshape(rendered.alpha.shape)
        selected = np.asarray(include, dtype=bool)[rendered.projected.source_index[contributors.entry]]
        alpha[contributors.pixel_index] = np.bincount(contributors.row[selected],
                                                      weights=contributors.weight[selected],
                                                      minlength=len(contributors.pixel_index))
        return np.clip(alpha, 0.0, 1.0).reshape(rendered.alpha.shape)

    # ----------------------------------------------------------------- backward

    def render_with_gradients(self, gaussian_map: GaussianMap, pose: CameraPose,
                              intrinsics: CameraIntrinsics,
                              residual_weights: np.ndarray) -> Tuple[RenderedFrame, np.ndarray, RenderGradients]:
        """Renders and back-propagates L = sum(residual_weights * [color, depth]).

        `residual_weights` is H x W x 4 (r, g, b, depth): the derivative of the
        caller's loss with respect to each rendered channel. The pose gradient is
        the derivative with respect to a left increment (rotation vector, then
        translation) as applied by pose_utils.apply_increment.
        """
        rendered = self.render(gaussian_map, pose, intrinsics)
        grads = self.backward(rendered, gaussian_map, pose, intrinsics, residual_weights)
        return rendered, grads.pose, grads

    def backward(self, rendered: RenderedFrame, gaussian_map: GaussianMap, pose: CameraPose,
                 intrinsics: CameraIntrinsics, residual_weights: np.ndarray,
                 pose_only: bool = False) -> RenderGradients:
        """Gradients for a frame already produced by `render` with the same map and pose.

        With `pose_only` the per-primitive fields are left at zero.
        """
        residual_weights = np.asarray(residual_weights, dtype=np.float64)
        expected = (intrinsics.height, intrinsics.width, WEIGHT_CHANNELS)
        if residual_weights.shape != expected:
            raise ProcessingError(f"residual_weights must be {expected}, got {residual_weights.shape}", "InputError")
        if not np.all(np.isfinite(residual_weights)):
            raise ProcessingError("residual_weights contain non-finite values", "NumericsError")

        projected = rendered.projected
        count = len(gaussian_map)
        grads = RenderGradients(pose=np.zeros(6), means=np.zeros((count, 3)), scales=np.zeros((count, 3)),
                                rotations=np.zeros((count, 4)), opacities=np.zeros(count),
                                colors=np.zeros((count, 3)))
        contributors = rendered.per_pixel_contributors
        if contributors is None:
            return grads

        entry_grads = self._composite_backward(rendered, projected, gaussian_map, residual_weights, pose_only)
        self._projection_backward(projected, gaussian_map, pose, intrinsics, entry_grads, grads, pose_only)

        for name in ("pose",) if pose_only else ("pose", "means", "scales", "rotations", "opacities", "colors"):
            if not np.all(np.isfinite(getattr(grads, name))):
                raise ProcessingError(f"Non-finite {name} gradient", "NumericsError")
        return grads

    @staticmethod
    def _behind(contributors: PixelContributors, values: np.ndarray) -> np.ndarray:
        """For every pair, the sum of `values` over the pairs behind it in the same pixel."""
        padded = np.zeros((len(contributors.pixel_index), contributors.depth_layers + 1))
        padded[contributors.row, contributors.rank] = values
        suffix = np.flip(np.cumsum(np.flip(padded, axis=1), axis=1), axis=1)
        return suffix[contributors.row, contributors.rank + 1]

    def _composite_backward(self, rendered: RenderedFrame, projected: ProjectedGaussians,
                            gaussian_map: GaussianMap, residual_weights: np.ndarray,
                            pose_only: bool = False) -> dict:
        c = rendered.per_pixel_contributors
        n_pixels = len(c.pixel_index)
        upstream = residual_weights.reshape(-1, WEIGHT_CHANNELS)[c.pixel_index]
        grad_color, grad_depth = upstream[:, :3], upstream[:, 3]

        acc = np.bincount(c.row, weights=c.weight, minlength=n_pixels)
        blended_depth = rendered.depth.reshape(-1)[c.pixel_index]
        covered = acc > 0
        safe_acc = np.where(covered, acc, 1.0)
        grad_depth_sum = np.where(covered, grad_depth / safe_acc, 0.0)
        grad_acc = np.where(covered, -grad_depth * blended_depth / safe_acc, 0.0)

        entry_colors = gaussian_map.colors[projected.source_index[c.entry]]
        entry_depths = projected.camera_depth[c.entry]
        pair_grad_color = grad_color[c.row]
        pair_grad_depth_sum = grad_depth_sum[c.row]
        # dL/dw for every pair
        layer_grad = (np.einsum("nc,nc->n", entry_colors, pair_grad_color)
                      + entry_depths * pair_grad_depth_sum + grad_acc[c.row])
        behind = self._behind(c, c.weight * layer_grad)

        active = c.transmittance >= self.transmittance_cutoff
        grad_alpha = np.where(active, c.transmittance * layer_grad, 0.0) - behind / (1.0 - c.alpha)
        grad_alpha = np.where(c.raw_alpha < self.alpha_clamp, grad_alpha, 0.0)

        grad_power = grad_alpha * (-0.5 * c.raw_alpha)
        conic_offset = np.einsum("nij,nj->ni", projected.conics[c.entry], c.offsets)
        grad_mean2d = -2.0 * grad_power[:, None] * conic_offset
        dx, dy = c.offsets[:, 0], c.offsets[:, 1]
        size = len(projected)

        def scatter(values):
            return np.bincount(c.entry, weights=values, minlength=size)

        grad_conic = np.zeros((size, 2, 2))
        grad_conic[:, 0, 0] = scatter(grad_power * dx * dx)
        grad_conic[:, 0, 1] = grad_conic[:, 1, 0] = scatter(grad_power * dx * dy)
        grad_conic[:, 1, 1] = scatter(grad_power * dy * dy)
        entry_grads = {
            "mean2d": np.stack([scatter(grad_mean2d[:, 0]), scatter(grad_mean2d[:, 1])], axis=1),
            "conic": grad_conic,
            "depth": scatter(c.weight * pair_grad_depth_sum),
        }
        if not pose_only:
            entry_grads["opacity"] = scatter(grad_alpha * c.falloff)
            entry_grads["color"] = np.stack([scatter(c.weight * pair_grad_color[:, ch]) for ch in range(3)],
                                            axis=1)
        return entry_grads

    def _projection_backward(self, projected: ProjectedGaussians, gaussian_map: GaussianMap,
                             pose: CameraPose, intrinsics: CameraIntrinsics, entry_grads: dict,
                             grads: RenderGradients, pose_only: bool = False) -> None:
        fx, fy = intrinsics.fx, intrinsics.fy
        rotation = pose.rotation
        conics, jac, cov3d = projected.conics, projected.jacobians, projected.cov3d
        x, y, z = projected.camera_points.T

        grad_cov2d = -conics @ entry_grads["conic"] @ conics
        jw = jac @ rotation
        grad_jw = 2.0 * grad_cov2d @ jw @ cov3d
        grad_cov3d = np.transpose(jw, (0, 2, 1)) @ grad_cov2d @ jw
        grad_jac = grad_jw @ rotation.T
        grad_rotation = np.transpose(jac, (0, 2, 1)) @ grad_jw

        grad_cam = np.einsum("kij,ki->kj", jac, entry_grads["mean2d"])
        grad_cam[:, 2] += entry_grads["depth"]
        grad_cam[:, 0] += grad_jac[:, 0, 2] * (-fx / (z * z))
        grad_cam[:, 1] += grad_jac[:, 1, 2] * (-fy / (z * z))
        grad_cam[:, 2] += (grad_jac[:, 0, 0] * (-fx / (z * z))
                           + grad_jac[:, 0, 2] * (2.0 * fx * x / z ** 3)
                           + grad_jac[:, 1, 1] * (-fy / (z * z))
                           + grad_jac[:, 1, 2] * (2.0 * fy * y / z ** 3))

        grad_omega = np.sum(np.cross(projected.camera_points, grad_cam), axis=0)
        grad_omega += vee(np.sum(grad_rotation, axis=0) @ rotation.T)
        grads.pose = np.concatenate([grad_omega, np.sum(grad_cam, axis=0)])
        if pose_only:
            return

        sources = projected.source_index
        grads.means[sources] = grad_cam @ rotation
        grads.opacities[sources] = entry_grads["opacity"]
        grads.colors[sources] = entry_grads["color"]

        quaternions = gaussian_map.rotations[sources]
        rot_g = quaternion_to_matrix(quaternions)
        scales = gaussian_map.scales[sources]
        scaled_axes = rot_g * scales[:, None, :]
        grad_axes = 2.0 * grad_cov3d @ scaled_axes
        grads.scales[sources] = np.einsum("kri,kri->ki", grad_axes, rot_g)
        grads.rotations[sources] = quaternion_matrix_gradient(quaternions, grad_axes * scales[:, None, :])
