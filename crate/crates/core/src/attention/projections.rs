use crate::numerics::{sigmoid, Matrix, Real};

/// Frozen attention projections of one layer.
#[derive(Clone, Debug)]
pub struct ProjectionSet<T> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub heads: usize,
    pub d_head: usize,
}

impl<T: Real> ProjectionSet<T> {
    pub fn d_model(&self) -> usize {
        self.wq.rows
    }

    pub fn width(&self) -> usize {
        self.heads * self.d_head
    }
}

/// Trainable low-rank update `scale · down · up` added to a frozen weight.
#[derive(Clone, Debug)]
pub struct LowRankDelta<T> {
    pub down: Matrix<T>,
    pub up: Matrix<T>,
    pub scale: T,
}

impl<T: Real> LowRankDelta<T> {
    pub fn rank(&self) -> usize {
        self.down.cols
    }

    /// `base + scale · down · up`.
    pub fn effective(&self, base: &Matrix<T>) -> Matrix<T> {
        let mut w = base.clone();
        let r = self.rank();
        for i in 0..w.rows {
            for p in 0..r {
                let d = self.down.data[i * r + p] * self.scale;
                if d.is_zero() {
                    continue;
                }
                for j in 0..w.cols {
                    w.data[i * w.cols + j] = w.data[i * w.cols + j] + d * self.up.data[p * w.cols + j];
                }
            }
        }
        w
    }
}

/// Low-rank gate weight with a bias: `σ(scale · h·down·up + bias)`.
#[derive(Clone, Debug)]
pub struct GateParams<T> {
    pub down: Matrix<T>,
    pub up: Matrix<T>,
    pub bias: alloc::vec::Vec<T>,
    pub scale: T,
}

impl<T: Real> GateParams<T> {
    pub fn preactivation(&self, h: &[T]) -> alloc::vec::Vec<T> {
        let z = self.down.vecmat(h);
        let mut pre = self.up.vecmat(&z);
        for (p, &b) in pre.iter_mut().zip(&self.bias) {
            *p = *p * self.scale + b;
        }
        pre
    }

    pub fn forward(&self, h: &[T]) -> alloc::vec::Vec<T> {
        self.preactivation(h).into_iter().map(sigmoid).collect()
    }
}
