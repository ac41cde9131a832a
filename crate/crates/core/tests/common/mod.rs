//! Independent exact model of the 3×3 toy used to check the lookahead filter.

#![allow(dead_code)]

use hint::envs::{Pos, WorldState};

pub const SIDE: i32 = 3;
pub const HEIGHTS: [f64; 9] = [-0.9, -0.4, 0.1, 0.6, -0.9, 0.6, 0.1, -0.4, 0.6];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Toy {
    pub r: (i32, i32),
    pub l: (i32, i32),
    pub d: (i32, i32),
    pub fuel: f64,
    pub step: usize,
    pub docked: bool,
}

impl Toy {
    pub fn of(s: &WorldState) -> Toy {
        let m = s.marine().unwrap();
        let p = |q: Pos| (q.x, q.y);
        Toy {
            r: p(s.positions[0]),
            l: p(s.positions[1]),
            d: p(m.destinations[0]),
            fuel: m.fuel[0],
            step: s.step,
            docked: m.docked[0],
        }
    }
}

fn refuel(cell: (i32, i32)) -> f64 {
    let h = HEIGHTS[(cell.1 * SIDE + cell.0) as usize];
    if h < -0.5 {
        0.0
    } else if h < 0.0 {
        0.15
    } else if h < 0.5 {
        0.30
    } else {
        0.5
    }
}

fn dist(a: (i32, i32), b: (i32, i32)) -> i32 {
    (a.0 - b.0).abs() + (a.1 - b.1).abs()
}

fn step_toward(a: (i32, i32), b: (i32, i32)) -> (i32, i32) {
    if a.0 != b.0 {
        (a.0 + (b.0 - a.0).signum(), a.1)
    } else {
        (a.0, a.1 + (b.1 - a.1).signum())
    }
}

pub fn terminal(t: &Toy, horizon: usize) -> bool {
    t.docked || t.fuel <= 0.0 || t.step >= horizon
}

/// Next cells chosen by the scripted expert.
pub fn expert(t: &Toy) -> ((i32, i32), (i32, i32)) {
    let r = if t.docked || t.fuel < dist(t.r, t.d) as f64 { t.r } else { step_toward(t.r, t.d) };
    (r, step_toward(t.l, t.r))
}

pub fn advance(t: &Toy, r_next: (i32, i32), l_next: (i32, i32), capacity: f64) -> Toy {
    let mut n = *t;
    if !t.docked && t.fuel > 0.0 && r_next != t.r {
        n.r = r_next;
        n.fuel = (t.fuel - 1.0).max(0.0);
    }
    n.l = l_next;
    if n.r == n.d {
        n.docked = true;
    }
    if !n.docked && n.r == n.l {
        n.fuel += (refuel(n.r) * capacity).min(capacity - n.fuel).max(0.0);
    }
    n.step += 1;
    n
}

/// Whether the expert's label at `t` is kept: the expert, rolled from `t`, docks.
pub fn accepts(t: &Toy, capacity: f64, horizon: usize) -> bool {
    if terminal(t, horizon) {
        return false;
    }
    let mut s = *t;
    while !terminal(&s, horizon) {
        let (r, l) = expert(&s);
        s = advance(&s, r, l, capacity);
    }
    s.docked
}

/// Every configuration of the toy: positions, destination, fuel levels, steps, docking.
pub fn enumerate(fuels: &[f64], steps: &[usize]) -> Vec<Toy> {
    let cells: Vec<(i32, i32)> = (0..SIDE).flat_map(|y| (0..SIDE).map(move |x| (x, y))).collect();
    let mut out = Vec::new();
    for &d in &cells {
        for &r in &cells {
            for &l in &cells {
                for &fuel in fuels {
                    for &step in steps {
                        out.push(Toy { r, l, d, fuel, step, docked: r == d });
                    }
                }
            }
        }
    }
    out
}
