#!/usr/bin/env python3
"""Write a deterministic synthetic LiDAR sweep as KITTI-style float32 x,y,z,i records.

The scene is a flat ground swept by 32 beams, a few box-shaped vehicles, a
wall and some poles, seen from a sensor 1.7 m above the ground.
"""
import argparse
import math
import random
import struct

SENSOR_HEIGHT = 1.7


def ray_box(o, d, lo, hi):
    t0, t1 = 0.0, math.inf
    for a in range(3):
        if abs(d[a]) < 1e-12:
            if not lo[a] <= o[a] <= hi[a]:
                return None
            continue
        ta, tb = (lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]
        t0, t1 = max(t0, min(ta, tb)), min(t1, max(ta, tb))
    return t0 if t0 <= t1 and t0 > 0 else None


def scene(rng):
    boxes = []
    for _ in range(9):
        x, y = rng.uniform(6, 45), rng.uniform(-18, 18)
        length, width = rng.uniform(3.6, 4.8), rng.uniform(1.6, 1.9)
        boxes.append(((x, y, -SENSOR_HEIGHT), (x + length, y + width, -SENSOR_HEIGHT + 1.5), 0.3))
    boxes.append(((8, 14, -SENSOR_HEIGHT), (60, 14.4, -SENSOR_HEIGHT + 3.0), 0.15))
    for _ in range(12):
        x, y = rng.uniform(5, 60), rng.uniform(-25, 25)
        boxes.append(((x, y, -SENSOR_HEIGHT), (x + 0.25, y + 0.25, 2.5), 0.5))
    return boxes


def sweep(rng, beams, azimuth_steps):
    boxes = scene(rng)
    points = []
    for b in range(beams):
        elev = math.radians(-24.0 + 26.0 * b / (beams - 1))
        for s in range(azimuth_steps):
            az = math.radians(-45.0 + 90.0 * s / azimuth_steps) + rng.uniform(-1e-3, 1e-3)
            d = (math.cos(elev) * math.cos(az), math.cos(elev) * math.sin(az), math.sin(elev))
            best, refl = None, 0.0
            for lo, hi, r in boxes:
                t = ray_box((0.0, 0.0, 0.0), d, lo, hi)
                if t is not None and (best is None or t < best):
                    best, refl = t, r
            if d[2] < 0:
                tg = -SENSOR_HEIGHT / d[2]
                if best is None or tg < best:
                    best, refl = tg, 0.05
            if best is None or best > 80.0:
                continue
            noise = rng.gauss(0.0, 0.02)
            p = [c * (best + noise) for c in d]
            points.append((p[0], p[1], p[2], min(1.0, max(0.0, refl + rng.gauss(0.0, 0.02)))))
    return points


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out")
    ap.add_argument("--seed", type=int, default=20240611)
    ap.add_argument("--beams", type=int, default=32)
    ap.add_argument("--azimuth-steps", type=int, default=600)
    a = ap.parse_args()
    pts = sweep(random.Random(a.seed), a.beams, a.azimuth_steps)
    with open(a.out, "wb") as f:
        for p in pts:
            f.write(struct.pack("<4f", *p))
    in_range = [p for p in pts if 0 <= p[0] < 70.4 and -40 <= p[1] < 40 and -3 <= p[2] < 1]
    pillars = {(int(p[0] / 0.16), int((p[1] + 40) / 0.16)) for p in in_range}
    print(f"{len(pts)} points, {len(in_range)} in range, {len(pillars)} pillars")


if __name__ == "__main__":
    main()
