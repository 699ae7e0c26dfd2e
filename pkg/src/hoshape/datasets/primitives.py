"""Analytic primitives: signed distance and ray intersection, vectorised over points / rays."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _dot(a, b):
    return np.einsum("ij,ij->i", a, b) if a.ndim == 2 and b.ndim == 2 else (a * b).sum(-1)


@dataclass
class Sphere:
    center: np.ndarray
    radius: float

    def sdf(self, p):
        return np.linalg.norm(p - self.center, axis=-1) - self.radius

    def bounding_radius(self):
        return self.radius, self.center

    def intersect(self, ro, rd):
        oc = ro - self.center
        b = _dot(oc, rd)
        c = _dot(oc, oc) - self.radius ** 2
        h = b * b - c
        ok = h >= 0
        t = np.where(ok, -b - np.sqrt(np.maximum(h, 0)), np.inf)
        t = np.where(t > 0, t, np.inf)
        n = (ro + t[:, None] * rd) - self.center
        return t, n / self.radius

    def transformed(self, r, t):
        return Sphere(self.center @ r.T + t, self.radius)


@dataclass
class Capsule:
    a: np.ndarray
    b: np.ndarray
    radius: float

    def sdf(self, p):
        pa, ba = p - self.a, self.b - self.a
        h = np.clip((pa @ ba) / (ba @ ba), 0, 1)
        return np.linalg.norm(pa - h[..., None] * ba, axis=-1) - self.radius

    def bounding_radius(self):
        c = 0.5 * (self.a + self.b)
        return 0.5 * np.linalg.norm(self.b - self.a) + self.radius, c

    def intersect(self, ro, rd):
        r = self.radius
        ba = self.b - self.a
        oa = ro - self.a
        baba = ba @ ba
        bard = rd @ ba
        baoa = oa @ ba
        rdoa = _dot(rd, oa)
        oaoa = _dot(oa, oa)
        qa = baba - bard * bard
        qb = baba * rdoa - baoa * bard
        qc = baba * oaoa - baoa * baoa - r * r * baba
        h = qb * qb - qa * qc
        t = np.full(len(ro), np.inf)
        ok = h >= 0
        with np.errstate(divide="ignore", invalid="ignore"):
            tb = (-qb - np.sqrt(np.maximum(h, 0))) / qa
        y = baoa + tb * bard
        body = ok & (y > 0) & (y < baba) & np.isfinite(tb)
        t = np.where(body, tb, t)
        # end caps
        oc = np.where((y <= 0)[:, None], oa, ro - self.b)
        b2 = _dot(rd, oc)
        c2 = _dot(oc, oc) - r * r
        h2 = b2 * b2 - c2
        cap = ok & ~body & (h2 > 0)
        t = np.where(cap, -b2 - np.sqrt(np.maximum(h2, 0)), t)
        t = np.where(t > 0, t, np.inf)
        hit = ro + np.where(np.isfinite(t), t, 0)[:, None] * rd
        s = np.clip(((hit - self.a) @ ba) / baba, 0, 1)
        n = (hit - (self.a + s[:, None] * ba)) / r
        return t, n

    def transformed(self, r, t):
        return Capsule(self.a @ r.T + t, self.b @ r.T + t, self.radius)


@dataclass
class Box:
    center: np.ndarray
    rotation: np.ndarray  # box-local -> frame
    half_sizes: np.ndarray

    def sdf(self, p):
        q = np.abs((p - self.center) @ self.rotation) - self.half_sizes
        return np.linalg.norm(np.maximum(q, 0), axis=-1) + np.minimum(q.max(-1), 0)

    def bounding_radius(self):
        return float(np.linalg.norm(self.half_sizes)), self.center

    def intersect(self, ro, rd):
        lo = (ro - self.center) @ self.rotation
        ld = rd @ self.rotation
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / ld
            t1 = (-self.half_sizes - lo) * inv
            t2 = (self.half_sizes - lo) * inv
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        t_near = np.nanmax(tmin, axis=1)
        t_far = np.nanmin(tmax, axis=1)
        ok = (t_near <= t_far) & (t_far > 0) & (t_near > 0)
        t = np.where(ok, t_near, np.inf)
        axis = np.nanargmax(tmin, axis=1)
        n_local = np.zeros_like(lo)
        n_local[np.arange(len(lo)), axis] = -np.sign(ld[np.arange(len(lo)), axis])
        return t, n_local @ self.rotation.T

    def transformed(self, r, t):
        return Box(self.center @ r.T + t, r @ self.rotation, self.half_sizes)


@dataclass
class Cylinder:
    center: np.ndarray
    axis: np.ndarray  # unit vector
    radius: float
    half_height: float

    def sdf(self, p):
        q = p - self.center
        along = q @ self.axis
        radial = np.linalg.norm(q - along[..., None] * self.axis, axis=-1)
        d = np.stack([radial - self.radius, np.abs(along) - self.half_height], axis=-1)
        return np.minimum(d.max(-1), 0) + np.linalg.norm(np.maximum(d, 0), axis=-1)

    def bounding_radius(self):
        return float(np.hypot(self.radius, self.half_height)), self.center

    def intersect(self, ro, rd):
        pa = self.center - self.half_height * self.axis
        ba = 2 * self.half_height * self.axis
        oc = ro - pa
        baba = ba @ ba
        bard = rd @ ba
        baoc = oc @ ba
        k2 = baba - bard * bard
        k1 = baba * _dot(oc, rd) - baoc * bard
        k0 = baba * _dot(oc, oc) - baoc * baoc - self.radius ** 2 * baba
        h = k1 * k1 - k2 * k0
        ok = h >= 0
        hs = np.sqrt(np.maximum(h, 0))
        with np.errstate(divide="ignore", invalid="ignore"):
            tb = (-k1 - hs) / k2
            y = baoc + tb * bard
            body = ok & (y > 0) & (y < baba) & np.isfinite(tb)
            tc = (np.where(y < 0, 0.0, baba) - baoc) / bard
            cap = ok & ~body & (np.abs(k1 + k2 * tc) < hs)
        t = np.where(body, tb, np.where(cap, tc, np.inf))
        t = np.where(t > 0, t, np.inf)
        tt = np.where(np.isfinite(t), t, 0)
        n_body = (oc + tt[:, None] * rd - ba * (y / baba)[:, None]) / self.radius
        n_cap = ba[None] * np.sign(y)[:, None] / np.sqrt(baba)
        n = np.where(body[:, None], n_body, n_cap)
        return t, n

    def transformed(self, r, t):
        return Cylinder(self.center @ r.T + t, r @ self.axis, self.radius, self.half_height)


def union_sdf(prims, p):
    return np.min(np.stack([q.sdf(p) for q in prims]), axis=0)
