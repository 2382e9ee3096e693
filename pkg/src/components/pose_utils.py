from typing import Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from src.models.data_models import CameraPose


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def vee(matrix: np.ndarray) -> np.ndarray:
    """Coefficients of the so(3) generators in d tr(Aᵀ [w]x) / dw."""
    return np.array([matrix[2, 1] - matrix[1, 2],
                     matrix[0, 2] - matrix[2, 0],
                     matrix[1, 0] - matrix[0, 1]])


def apply_increment(pose: CameraPose, xi: np.ndarray) -> CameraPose:
    """Left-multiplies the pose by the rigid motion (rotvec xi[:3], translation xi[3:]).

    First order: x_cam' = x_cam + xi[:3] x x_cam + xi[3:].
    """
    xi = np.asarray(xi, dtype=np.float64)
    delta = Rotation.from_rotvec(xi[:3]).as_matrix()
    rotation = delta @ pose.rotation
    # re-orthonormalise to keep the invariant after many updates
    u, _, vt = np.linalg.svd(rotation)
    rotation = u @ vt
    return CameraPose(rotation, delta @ pose.translation + xi[3:])


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """(N, 4) quaternions (w, x, y, z) → (N, 3, 3) rotation matrices; input is normalised."""
    q = np.asarray(q, dtype=np.float64).reshape(-1, 4)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    r, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    matrix = np.empty((len(q), 3, 3))
    matrix[:, 0, 0] = 1 - 2 * (y * y + z * z)
    matrix[:, 0, 1] = 2 * (x * y - r * z)
    matrix[:, 0, 2] = 2 * (x * z + r * y)
    matrix[:, 1, 0] = 2 * (x * y + r * z)
    matrix[:, 1, 1] = 1 - 2 * (x * x + z * z)
    matrix[:, 1, 2] = 2 * (y * z - r * x)
    matrix[:, 2, 0] = 2 * (x * z - r * y)
    matrix[:, 2, 1] = 2 * (y * z + r * x)
    matrix[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return matrix


def quaternion_matrix_gradient(q: np.ndarray, grad_matrix: np.ndarray) -> np.ndarray:
    """Back-propagates dL/dR (N, 3, 3) to the raw quaternions (N, 4)."""
    q = np.asarray(q, dtype=np.float64).reshape(-1, 4)
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / norm
    r, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    g = grad_matrix
    zero = np.zeros_like(r)

    def contract(d):
        return 2.0 * np.einsum("nij,nij->n", g, np.stack(d, axis=-1).reshape(-1, 3, 3))

    dr = contract([zero, -z, y, z, zero, -x, -y, x, zero])
    dx = contract([zero, y, z, y, -2 * x, -r, z, r, -2 * x])
    dy = contract([-2 * y, x, r, x, zero, z, -r, z, -2 * y])
    dz = contract([-2 * z, -r, x, r, -2 * z, y, x, y, zero])
    grad_n = np.stack([dr, dx, dy, dz], axis=1)
    # through the normalisation q / |q|
    radial = np.sum(grad_n * qn, axis=1, keepdims=True)
    return (grad_n - qn * radial) / norm


def pose_to_tum(pose: CameraPose) -> Tuple[np.ndarray, np.ndarray]:
    """World-to-camera pose → TUM (translation, quaternion xyzw) of the camera-to-world transform."""
    camera_to_world = pose.inverse()
    quaternion = Rotation.from_matrix(camera_to_world.rotation).as_quat()
    if quaternion[3] < 0:
        quaternion = -quaternion
    return camera_to_world.translation.copy(), quaternion


def tum_to_pose(translation: np.ndarray, quaternion_xyzw: np.ndarray) -> CameraPose:
    quaternion = np.asarray(quaternion_xyzw, dtype=np.float64)
    quaternion = quaternion / np.linalg.norm(quaternion)
    camera_to_world = CameraPose(Rotation.from_quat(quaternion).as_matrix(), translation)
    return camera_to_world.inverse()


def rotation_angle_deg(a: CameraPose, b: CameraPose) -> float:
    relative = a.rotation @ b.rotation.T
    return float(np.degrees(Rotation.from_matrix(relative).magnitude()))
