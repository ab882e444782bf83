"""
Query perturbation and top-k' expansion on the unit hypersphere.

Under the uniform-directions model the k-th nearest neighbour of a query sits at the angle
alpha_k whose spherical cap holds a k/m share of the sphere. Perturbing the query by an angle
delta_alpha moves that cap, and k' counts the points in the widened cap of angle
alpha_k + delta_alpha so the original top-k still lies inside the top-k' of the perturbed query.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import betainc, gammaln

import utils
from utils import InputError, ParameterError

logger = logging.getLogger(__name__)

BISECTION_TOL = 1e-12
BISECTION_MAX_ITER = 200


@dataclass(frozen=True)
class PerturbationParams:
    """
    DistanceDP parameters: L2 norm of the noise added to the unit-normalised query.
    """
    radius: float
    seed: Optional[int] = None

    def __post_init__(self):
        if not (math.isfinite(self.radius) and 0.0 <= self.radius < 1.0):
            raise ParameterError(f"perturbation radius must lie in [0, 1), got {self.radius}",
                                 details={'radius': self.radius})


@dataclass(frozen=True)
class ExpansionPlan:
    k: int
    k_prime: int
    alpha_k: float
    delta_alpha: float
    n: int
    m: int
    saturated: bool = False
    radius: Optional[float] = None

    @property
    def alpha_k_prime(self):
        return min(self.alpha_k + self.delta_alpha, math.pi)

    @property
    def ratio(self):
        return self.k_prime / self.k


def surface_area_log(n):
    """
    Natural log of the surface area 2*pi^(n/2)/Gamma(n/2) of the unit sphere in R^n.

    Parameters:
    n (int): Dimension, n >= 2.

    Returns:
    float: ln of the surface area, computed in log space so n in the thousands does not overflow.
    """
    if n < 2:
        raise ParameterError(f"dimension must be >= 2, got {n}", details={'n': n})
    return math.log(2.0) + 0.5 * n * math.log(math.pi) - float(gammaln(0.5 * n))


def cap_fraction(alpha, n):
    """
    Fraction of the unit sphere in R^n lying within angle alpha of a pole.

    Equals (Omega_{n-1}/Omega_n) * integral_0^alpha sin^(n-2)(theta) dtheta, evaluated as
    0.5 * I_{sin^2 alpha}((n-1)/2, 1/2) and reflected above pi/2.

    Parameters:
    alpha (float): Cap angle in radians, 0 <= alpha <= pi.
    n (int): Dimension, n >= 2.

    Returns:
    float: Fraction in [0, 1].
    """
    if n < 2:
        raise ParameterError(f"dimension must be >= 2, got {n}", details={'n': n})
    if not (0.0 <= alpha <= math.pi):
        raise ParameterError(f"cap angle must lie in [0, pi], got {alpha}",
                             details={'alpha': alpha})
    if alpha == 0.0:
        return 0.0
    if alpha == math.pi:
        return 1.0
    a = 0.5 * (n - 1)
    if alpha <= 0.5 * math.pi:
        return 0.5 * float(betainc(a, 0.5, math.sin(alpha) ** 2))
    return 1.0 - 0.5 * float(betainc(a, 0.5, math.sin(math.pi - alpha) ** 2))


def alpha_of_fraction(p, n):
    """
    Cap angle whose cap holds the fraction p of the sphere, by bisection.

    Parameters:
    p (float): Target fraction in [0, 1].
    n (int): Dimension.

    Returns:
    float: Angle in [0, pi] with |cap_fraction(angle, n) - p| <= BISECTION_TOL
    (or the bracket exhausted after BISECTION_MAX_ITER halvings).
    """
    if not (0.0 <= p <= 1.0):
        raise ParameterError(f"cap fraction must lie in [0, 1], got {p}")
    if p == 0.0:
        return 0.0
    if p == 1.0:
        return math.pi

    lo, hi = 0.0, math.pi
    mid = 0.5 * (lo + hi)
    for _ in range(BISECTION_MAX_ITER):
        mid = 0.5 * (lo + hi)
        f = cap_fraction(mid, n)
        if abs(f - p) <= BISECTION_TOL:
            break
        if f < p:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 0.0:
            break
    return mid


def alpha_of_k(k, m, n):
    """
    Angular distance of the k-th nearest of m uniform points: cap_fraction(alpha, n) = k/m.
    """
    if not (1 <= k <= m):
        raise ParameterError(f"need 1 <= k <= m, got k={k}, m={m}", details={'k': k, 'm': m})
    if k == m:
        return math.pi
    return alpha_of_fraction(k / m, n)


def delta_alpha_of_radius(radius, mapping='chord'):
    """
    Angular displacement attributed to a perturbation of L2 norm radius.

    Parameters:
    radius (float): Noise norm, 0 <= radius < 1.
    mapping (str): 'chord' gives 2*arcsin(radius/2), the angle subtended by a chord of length
    radius; 'tangent' gives arcsin(radius), the largest angle a unit vector can turn when a
    vector of norm radius is added and the sum renormalised.

    Returns:
    float: Delta alpha in radians.
    """
    if not (math.isfinite(radius) and 0.0 <= radius < 1.0):
        raise ParameterError(f"perturbation radius must lie in [0, 1), got {radius}",
                             details={'radius': radius})
    if mapping == 'chord':
        return 2.0 * math.asin(0.5 * radius)
    if mapping == 'tangent':
        return math.asin(radius)
    raise ParameterError(f"unknown radius mapping '{mapping}'")


def k_prime(k, m, n, delta_alpha):
    """
    Expanded result count k' = ceil(m * (F(alpha_k + delta_alpha) - F(alpha_k)) + k), F = cap_fraction.

    Parameters:
    k (int): Requested result count.
    m (int): Database size.
    n (int): Embedding dimension.
    delta_alpha (float): Angular widening in radians, >= 0.

    Returns:
    ExpansionPlan: The plan; saturated (k' = m) when alpha_k + delta_alpha passes pi.
    """
    if delta_alpha < 0 or not math.isfinite(delta_alpha):
        raise ParameterError(f"delta alpha must be a finite non-negative angle, got {delta_alpha}")
    alpha_k = alpha_of_k(k, m, n)

    if alpha_k + delta_alpha > math.pi:
        logger.warning('widened cap passes pi (alpha_k=%.6f, delta=%.6f); k\' saturates at m=%d',
                       alpha_k, delta_alpha, m)
        return ExpansionPlan(k, m, alpha_k, delta_alpha, n, m, saturated=True)
    if delta_alpha == 0.0:
        return ExpansionPlan(k, k, alpha_k, 0.0, n, m)

    extra = m * (cap_fraction(alpha_k + delta_alpha, n) - cap_fraction(alpha_k, n))
    kp = min(int(math.ceil(extra + k)), m)
    return ExpansionPlan(k, max(kp, k), alpha_k, delta_alpha, n, m)


def plan_for_radius(k, m, n, radius, mapping='chord'):
    delta = delta_alpha_of_radius(radius, mapping)
    plan = k_prime(k, m, n, delta)
    return ExpansionPlan(plan.k, plan.k_prime, plan.alpha_k, plan.delta_alpha, n, m,
                         saturated=plan.saturated, radius=radius)


def perturb_query(e_q, params, rng=None):
    """
    DistanceDP perturbation: normalise, add noise of norm params.radius in a uniform
    direction, renormalise.

    Parameters:
    e_q (array-like): Nonzero query embedding.
    params (PerturbationParams): Radius and optional seed.
    rng (numpy.random.Generator, optional): Generator used when params.seed is None.

    Returns:
    numpy.ndarray: Unit-norm perturbed query.

    Raises:
    InputError: If e_q is the zero vector.
    """
    u = utils.unit_normalize(e_q, name='query embedding')
    if params.radius == 0.0:
        return u
    if params.seed is not None:
        rng = np.random.default_rng(params.seed)
    elif rng is None:
        rng = np.random.default_rng()

    direction = rng.standard_normal(u.shape[0])
    norm = np.linalg.norm(direction)
    while norm == 0.0:
        direction = rng.standard_normal(u.shape[0])
        norm = np.linalg.norm(direction)

    perturbed = u + params.radius * direction / norm
    length = np.linalg.norm(perturbed)
    if length == 0.0:
        raise InputError('perturbation cancelled the query vector')
    return perturbed / length


def angle_between(a, b):
    # arctan2 form stays accurate for nearly parallel vectors
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    cross = np.linalg.norm(a * np.linalg.norm(b) - b * np.linalg.norm(a))
    dot = np.linalg.norm(a * np.linalg.norm(b) + b * np.linalg.norm(a))
    return 2.0 * math.atan2(cross, dot)


if __name__ == '__main__':
    utils.setup_logging()
    m = 100000
    print('n     r      k   k\'     k\'/k')
    for n in (768, 1536):
        for radius in (0.033, 0.02):
            for k in (5, 10, 15, 20):
                plan = plan_for_radius(k, m, n, radius)
                print(f'{n:<5} {radius:<6} {k:<3} {plan.k_prime:<6} {plan.ratio:.1f}')
