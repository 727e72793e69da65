//! Straight-line scalar reference implementations. Nothing here touches the
//! tape or the tensor kernels; weights are read element by element.
#![allow(dead_code, clippy::needless_range_loop)]

use gres2net::nn::{Conv1d, ParamStore};
use gres2net::res2net::{Activation, Block};
use gres2net::Tensor3;

/// Channels × time for one batch element.
pub type Series = Vec<Vec<f64>>;

pub fn series_of(x: &Tensor3, b: usize) -> Series {
    (0..x.channels()).map(|c| (0..x.time()).map(|t| x.at(b, c, t)).collect()).collect()
}

/// Same-padded 1-D convolution with explicit loops.
pub fn naive_conv(x: &Series, weight: &Tensor3, bias: Option<&Tensor3>) -> Series {
    let (cout, cin, k) = (weight.batch(), weight.channels(), weight.time());
    assert_eq!(x.len(), cin);
    let time = x[0].len();
    let left = (k - 1) / 2;
    let mut y = vec![vec![0.0; time]; cout];
    for o in 0..cout {
        for t in 0..time {
            let mut acc = bias.map_or(0.0, |b| b.at(0, o, 0));
            for c in 0..cin {
                for j in 0..k {
                    let src = t as isize + j as isize - left as isize;
                    if src >= 0 && (src as usize) < time {
                        acc += weight.at(o, c, j) * x[c][src as usize];
                    }
                }
            }
            y[o][t] = acc;
        }
    }
    y
}

fn conv(store: &ParamStore, layer: &Conv1d, x: &Series) -> Series {
    naive_conv(x, store.get(layer.weight), Some(store.get(layer.bias)))
}

fn relu(x: Series) -> Series {
    x.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect()
}

/// Forward of one block on one batch element. `gates`: `None` ungated,
/// `Some(None)` learned gates, `Some(Some(v))` every gate pinned to `v`.
pub fn block_oracle(store: &ParamStore, block: &Block, x: &Series, gates: Option<Option<f64>>) -> Series {
    let cfg = &block.config;
    let (s, w) = (cfg.groups, cfg.group_width);
    let full = conv(store, &block.expand, x);
    let xs: Vec<Series> = (0..s).map(|i| full[i * w..(i + 1) * w].to_vec()).collect();
    let k = |i: usize, z: &Series| {
        let y = conv(store, &block.group_convs[i - 2], z);
        match cfg.group_activation {
            Activation::Relu => relu(y),
            Activation::None => y,
        }
    };
    let mut ys: Vec<Series> = vec![xs[0].clone(), k(2, &xs[1])];
    for i in 3..=s {
        let prev = &ys[i - 2];
        let g: Option<Series> = match gates {
            None => None,
            Some(Some(v)) => Some(vec![vec![v; prev[0].len()]; w]),
            Some(None) => {
                let unit = &block.gates[i - 3];
                let mut joined = conv(store, &unit.from_full, &full);
                joined.extend(conv(store, &unit.from_prev, prev));
                joined.extend(conv(store, &unit.from_input, &xs[i - 1]));
                let fused = conv(store, &unit.fuse, &joined);
                Some(fused.into_iter().map(|r| r.into_iter().map(f64::tanh).collect()).collect())
            }
        };
        let z: Series = (0..w)
            .map(|c| {
                (0..prev[c].len())
                    .map(|t| xs[i - 1][c][t] + g.as_ref().map_or(1.0, |g| g[c][t]) * prev[c][t])
                    .collect()
            })
            .collect();
        ys.push(k(i, &z));
    }
    let joined: Series = ys.into_iter().flatten().collect();
    conv(store, &block.compress, &joined)
}

pub fn max_abs_diff(a: &Series, b: &Series) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(r, s)| {
            assert_eq!(r.len(), s.len());
            r.iter().zip(s).map(|(x, y)| (x - y).abs())
        })
        .fold(0.0, f64::max)
}
