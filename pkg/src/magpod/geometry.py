"""Parametric geometry map for the magnet testbed.

The mesh topology is fixed on the reference square. A rectangular magnet
footprint sits at the center of the reference domain; a given parameter
point rescales it (height/width), shifts it along x, and tilts it. Mesh
nodes follow that affine transform fully inside an inner collar around the
footprint, not at all outside an outer collar, and via a C1 smoothstep
blend in between. Boundary nodes therefore never move and element
connectivity never changes; only nodal coordinates depend on the
parameters, through closed-form expressions that are smooth in the
parameters, which is what makes the nodal sensitivities exact.

Parameter roles, in order (units mm, mm, mm, deg):
    magnet height, magnet width, magnet x-offset datum, tilt angle datum.
Datums are chosen so the box midpoint is the undeformed reference
configuration.
"""

import numpy as np

# Reference magnet footprint (mm) and parameter datums.
REF_HALF_WIDTH = 7.5
REF_HALF_HEIGHT = 3.5
REF_HEIGHT = 2.0 * REF_HALF_HEIGHT
REF_WIDTH = 2.0 * REF_HALF_WIDTH
OFFSET_DATUM = 10.0
TILT_DATUM = 19.0

# Blend collars in scaled p-norm distance from the footprint. The outer
# collar is wide so the band absorbs the largest in-box magnet scalings
# without the Jacobian dipping near zero.
BLEND_INNER = 1.15
BLEND_OUTER = 4.5
BLEND_POWER = 6

# Material region collars (Gauss points, reference coordinates).
RING_INNER = 1.35
RING_OUTER = 2.2

# Fixed source patches (mm), outside the deformation collar: +J on the
# right patch, -J on the left one (go/return pair, zero net current).
COIL_X = (36.0, 44.0)
COIL_Y = (-12.0, 12.0)

ROLE_DEFAULTS = (7.0, 15.0, 10.0, 19.0)
N_ROLES = 4


def role_values(p):
    """Geometry roles (MH, MW, offset, tilt) for a parameter point.

    Points with fewer than four components control the leading roles; the
    remaining roles sit at their datum values.
    """
    vals = np.asarray(p.values, dtype=float)
    if vals.size > N_ROLES:
        raise ValueError(
            f"testbed geometry supports at most {N_ROLES} parameters, got {vals.size}"
        )
    full = np.array(ROLE_DEFAULTS, dtype=float)
    full[: vals.size] = vals
    return full


def _transform_terms(p):
    """Scale matrix, rotation, center shift and their parameter derivatives."""
    mh, mw, mag, theta1 = role_values(p)
    sx = mw / REF_WIDTH
    sy = mh / REF_HEIGHT
    th = np.deg2rad(theta1 - TILT_DATUM)
    c, s = np.cos(th), np.sin(th)
    R = np.array([[c, -s], [s, c]])
    dR = np.array([[-s, -c], [c, -s]]) * (np.pi / 180.0)
    S = np.diag([sx, sy])
    center = np.array([mag - OFFSET_DATUM, 0.0])
    return R, dR, S, center


def blend_weight(xy_mm):
    """C1 blend weight on reference coordinates: 1 on the magnet collar,
    0 outside the outer collar, smoothstep in between."""
    xy = np.asarray(xy_mm, dtype=float)
    rho = (
        np.abs(xy[..., 0] / REF_HALF_WIDTH) ** BLEND_POWER
        + np.abs(xy[..., 1] / REF_HALF_HEIGHT) ** BLEND_POWER
    ) ** (1.0 / BLEND_POWER)
    t = np.clip((BLEND_OUTER - rho) / (BLEND_OUTER - BLEND_INNER), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def scaled_distance(xy_mm):
    """Scaled p-norm distance from the reference footprint center."""
    xy = np.asarray(xy_mm, dtype=float)
    return (
        np.abs(xy[..., 0] / REF_HALF_WIDTH) ** BLEND_POWER
        + np.abs(xy[..., 1] / REF_HALF_HEIGHT) ** BLEND_POWER
    ) ** (1.0 / BLEND_POWER)


def map_nodes(nodes_mm, weights, p):
    """Mapped node coordinates (mm) for parameter point p.

    ``weights`` is the precomputed blend weight at each reference node.
    """
    R, _, S, center = _transform_terms(p)
    target = nodes_mm @ (R @ S).T + center
    return nodes_mm + weights[:, None] * (target - nodes_mm)


def node_velocities(nodes_mm, weights, p):
    """Derivative of mapped node coordinates w.r.t. each parameter.

    Returns an array of shape (n_params, n_nodes, 2) in mm per parameter
    unit, covering the first ``len(p.values)`` geometry roles.
    """
    R, dR, S, _ = _transform_terms(p)
    n_active = len(p.values)
    out = np.zeros((n_active, nodes_mm.shape[0], 2))
    # d/dMH and d/dMW act through the scale matrix.
    partial_scales = (
        np.diag([0.0, 1.0 / REF_HEIGHT]),
        np.diag([1.0 / REF_WIDTH, 0.0]),
    )
    for i in range(n_active):
        if i == 0 or i == 1:
            dT = nodes_mm @ (R @ partial_scales[i]).T
        elif i == 2:
            dT = np.broadcast_to(np.array([1.0, 0.0]), nodes_mm.shape)
        else:
            dT = nodes_mm @ (dR @ S).T
        out[i] = weights[:, None] * dT
    return out


def magnet_corners(p):
    """Physical corners (mm) of the tilted magnet rectangle, shape (4, 2)."""
    mh, mw, mag, theta1 = role_values(p)
    R, _, _, _ = _transform_terms(p)
    hw, hh = 0.5 * mw, 0.5 * mh
    local = np.array([[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]])
    return local @ R.T + np.array([mag - OFFSET_DATUM, 0.0])
