//! Convex polygon clipping and area.

use nalgebra::Vector2;

pub type Vec2 = Vector2<f64>;

/// Shoelace area; positive for counter-clockwise vertex order.
pub fn signed_area(poly: &[Vec2]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        s += a.x * b.y - b.x * a.y;
    }
    0.5 * s
}

pub fn area(poly: &[Vec2]) -> f64 {
    signed_area(poly).abs()
}

/// Sutherland–Hodgman: clips `subject` against the convex counter-clockwise
/// polygon `clip`.
pub fn clip_convex(subject: &[Vec2], clip: &[Vec2]) -> Vec<Vec2> {
    let mut out = subject.to_vec();
    let m = clip.len();
    for i in 0..m {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % m]);
        let edge = b - a;
        let side = |p: &Vec2| edge.x * (p.y - a.y) - edge.y * (p.x - a.x);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(&cur), side(&prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    out.push(prev + (cur - prev) * (sp / (sp - sc)));
                }
                out.push(cur);
            } else if sp >= 0.0 {
                out.push(prev + (cur - prev) * (sp / (sp - sc)));
            }
        }
    }
    out
}

/// Counter-clockwise parallelogram centered at the origin with edge vectors `u`, `v`.
pub fn parallelogram(u: Vec2, v: Vec2) -> Vec<Vec2> {
    let pts = vec![-(u + v) * 0.5, (u - v) * 0.5, (u + v) * 0.5, (v - u) * 0.5];
    if signed_area(&pts) < 0.0 {
        pts.into_iter().rev().collect()
    } else {
        pts
    }
}

/// Counter-clockwise axis-aligned rectangle centered at the origin.
pub fn centered_rect(w: f64, h: f64) -> Vec<Vec2> {
    let (x, y) = (0.5 * w, 0.5 * h);
    vec![Vec2::new(-x, -y), Vec2::new(x, -y), Vec2::new(x, y), Vec2::new(-x, y)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_areas() {
        assert_eq!(area(&centered_rect(2.0, 3.0)), 6.0);
        let p = parallelogram(Vec2::new(1.0, 0.0), Vec2::new(0.5, 1.0));
        assert!((area(&p) - 1.0).abs() < 1e-15);
        assert!(signed_area(&p) > 0.0);
    }

    #[test]
    fn clip_inside_and_disjoint() {
        let small = centered_rect(1.0, 1.0);
        let big = centered_rect(4.0, 4.0);
        assert!((area(&clip_convex(&small, &big)) - 1.0).abs() < 1e-15);
        let shifted: Vec<Vec2> = small.iter().map(|p| p + Vec2::new(10.0, 0.0)).collect();
        assert_eq!(area(&clip_convex(&shifted, &big)), 0.0);
    }

    #[test]
    fn diamond_in_square() {
        // unit square rotated 45°, clipped by the unit square: an octagon
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let d = parallelogram(Vec2::new(s, s), Vec2::new(-s, s));
        let a = area(&clip_convex(&d, &centered_rect(1.0, 1.0)));
        // four tips of height (√2 - 1)/2 stick out of the square
        let leg = (2f64.sqrt() - 1.0) / 2.0;
        assert!((a - (1.0 - 4.0 * leg * leg)).abs() < 1e-12, "{a}");
    }
}
