//! Feature maps, window partitioning and the 3×3 convolution.
//!
//! Each token is one pixel; a window of side `M` holds `M²` tokens in
//! row-major scan order. Maps whose sides are not multiples of `M` are
//! reflect-padded on the bottom and right, and the padding is cropped again
//! on merge.

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::tensor::Matrix;

/// `H × W × C` feature grid stored as an `(H·W) × C` matrix, pixels in
/// row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    pixels: Matrix,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, pixels: Matrix) -> Result<Self> {
        if pixels.rows() != height * width {
            return Err(invalid(format!(
                "{height}x{width} feature map needs {} pixel rows, got {}",
                height * width,
                pixels.rows()
            )));
        }
        Ok(FeatureMap { height, width, pixels })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        FeatureMap {
            height,
            width,
            pixels: Matrix::zeros(height * width, channels),
        }
    }

    pub fn random_normal<R: Rng + ?Sized>(height: usize, width: usize, channels: usize, std: f64, rng: &mut R) -> Self {
        FeatureMap {
            height,
            width,
            pixels: Matrix::random_normal(height * width, channels, std, rng),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.pixels.cols()
    }

    pub fn pixels(&self) -> &Matrix {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut Matrix {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Matrix {
        self.pixels
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> &[f64] {
        self.pixels.row(y * self.width + x)
    }

    pub fn add(&self, other: &FeatureMap) -> Result<FeatureMap> {
        self.check_dims(other)?;
        Ok(FeatureMap {
            height: self.height,
            width: self.width,
            pixels: self.pixels.add(&other.pixels)?,
        })
    }

    pub fn sub(&self, other: &FeatureMap) -> Result<FeatureMap> {
        self.check_dims(other)?;
        Ok(FeatureMap {
            height: self.height,
            width: self.width,
            pixels: self.pixels.sub(&other.pixels)?,
        })
    }

    fn check_dims(&self, other: &FeatureMap) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape {
                op: "feature map",
                lhs: (self.height, self.width),
                rhs: (other.height, other.width),
            });
        }
        Ok(())
    }
}

/// The `N × C` tokens of one window.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet {
    pub tokens: Matrix,
}

impl TokenSet {
    pub fn new(tokens: Matrix) -> Self {
        TokenSet { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn channels(&self) -> usize {
        self.tokens.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    pub window: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Row-major over the window grid.
    pub windows: Vec<TokenSet>,
    /// `(pad_bottom, pad_right)` in pixels.
    pub pad: (usize, usize),
}

impl WindowSet {
    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    fn padded_dims(&self) -> (usize, usize) {
        (self.grid_rows * self.window, self.grid_cols * self.window)
    }

    fn channels(&self) -> usize {
        self.windows.first().map_or(0, TokenSet::channels)
    }

    fn check(&self) -> Result<()> {
        let n = self.tokens_per_window();
        if self.windows.len() != self.grid_rows * self.grid_cols {
            return Err(invalid(format!(
                "window grid {}x{} but {} windows",
                self.grid_rows,
                self.grid_cols,
                self.windows.len()
            )));
        }
        let c = self.channels();
        if let Some(bad) = self.windows.iter().position(|w| w.len() != n || w.channels() != c) {
            return Err(invalid(format!("window {bad} is not {n}x{c}")));
        }
        Ok(())
    }

    /// Padded-grid pixel `(y, x)` of token `t` in window `w`.
    #[inline]
    fn locate(&self, w: usize, t: usize) -> (usize, usize) {
        let (gr, gc) = (w / self.grid_cols, w % self.grid_cols);
        let (ty, tx) = (t / self.window, t % self.window);
        (gr * self.window + ty, gc * self.window + tx)
    }
}

/// Reflection about the edges without repeating the edge pixel, bouncing as
/// often as needed.
#[inline]
pub(crate) fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

fn check_window(h: usize, w: usize, m: usize) -> Result<()> {
    if m < 2 {
        return Err(invalid(format!("window size must be at least 2, got {m}")));
    }
    if h == 0 || w == 0 {
        return Err(invalid("empty feature map"));
    }
    if m > 2 * h.min(w) {
        return Err(invalid(format!(
            "window {m} exceeds twice the smaller side of a {h}x{w} map"
        )));
    }
    Ok(())
}

pub fn window_partition(f: &FeatureMap, m: usize) -> Result<WindowSet> {
    let (h, w) = (f.height, f.width);
    check_window(h, w, m)?;
    let grid_rows = h.div_ceil(m);
    let grid_cols = w.div_ceil(m);
    let c = f.channels();
    let mut ws = WindowSet {
        window: m,
        grid_rows,
        grid_cols,
        windows: Vec::with_capacity(grid_rows * grid_cols),
        pad: (grid_rows * m - h, grid_cols * m - w),
    };
    for wi in 0..grid_rows * grid_cols {
        let mut tokens = Matrix::zeros(m * m, c);
        for t in 0..m * m {
            let (y, x) = ws.locate(wi, t);
            tokens.row_mut(t).copy_from_slice(f.at(reflect(y, h), reflect(x, w)));
        }
        ws.windows.push(TokenSet::new(tokens));
    }
    Ok(ws)
}

pub fn window_merge(ws: &WindowSet, h: usize, w: usize) -> Result<FeatureMap> {
    ws.check()?;
    if ws.padded_dims() != (h + ws.pad.0, w + ws.pad.1) {
        return Err(invalid(format!(
            "window grid covers {:?} but {h}x{w} plus padding {:?} was requested",
            ws.padded_dims(),
            ws.pad
        )));
    }
    let mut out = FeatureMap::zeros(h, w, ws.channels());
    for (wi, win) in ws.windows.iter().enumerate() {
        for t in 0..win.len() {
            let (y, x) = ws.locate(wi, t);
            if y < h && x < w {
                out.pixels.row_mut(y * w + x).copy_from_slice(win.tokens.row(t));
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`window_partition`]: sums per-token gradients back onto the
/// source pixels, including the reflected copies.
pub fn partition_adjoint(grads: &[Matrix], like: &WindowSet, h: usize, w: usize) -> Result<FeatureMap> {
    if grads.len() != like.windows.len() {
        return Err(invalid("gradient list does not match window count"));
    }
    let c = like.channels();
    let mut out = FeatureMap::zeros(h, w, c);
    for (wi, g) in grads.iter().enumerate() {
        for t in 0..g.rows() {
            let (y, x) = like.locate(wi, t);
            let dst = out.pixels.row_mut(reflect(y, h) * w + reflect(x, w));
            for (d, s) in dst.iter_mut().zip(g.row(t)) {
                *d += s;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`window_merge`]: routes pixel gradients to their tokens, with
/// zeros on padded tokens.
pub fn merge_adjoint(grad: &FeatureMap, like: &WindowSet) -> Vec<Matrix> {
    let (h, w) = (grad.height, grad.width);
    let n = like.tokens_per_window();
    (0..like.windows.len())
        .map(|wi| {
            let mut g = Matrix::zeros(n, grad.channels());
            for t in 0..n {
                let (y, x) = like.locate(wi, t);
                if y < h && x < w {
                    g.row_mut(t).copy_from_slice(grad.at(y, x));
                }
            }
            g
        })
        .collect()
}

/// 3×3 convolution weights. `kernel` is `(9·C_in) × C_out`; row
/// `(tap·C_in + ci)` with `tap = 3·dy + dx` over the neighbourhood offsets
/// `dy, dx ∈ {0,1,2}` (offset minus one).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub kernel: Matrix,
    pub bias: Matrix,
}

impl ConvParams {
    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        ConvParams {
            kernel: Matrix::zeros(9 * c_in, c_out),
            bias: Matrix::zeros(1, c_out),
        }
    }

    /// Centre tap 1 on matching channels.
    pub fn identity(c: usize) -> Self {
        let mut p = Self::zeros(c, c);
        for ch in 0..c {
            p.kernel.set(4 * c + ch, ch, 1.0);
        }
        p
    }

    /// He-style normal initialisation scaled by `gain`.
    pub fn random<R: Rng + ?Sized>(c_in: usize, c_out: usize, gain: f64, rng: &mut R) -> Self {
        let std = gain * (2.0 / (9 * c_in) as f64).sqrt();
        ConvParams {
            kernel: Matrix::random_normal(9 * c_in, c_out, std, rng),
            bias: Matrix::zeros(1, c_out),
        }
    }

    pub fn c_in(&self) -> usize {
        self.kernel.rows() / 9
    }

    pub fn c_out(&self) -> usize {
        self.kernel.cols()
    }
}

#[inline]
fn tap_source(y: usize, x: usize, dy: usize, dx: usize, h: usize, w: usize) -> Option<usize> {
    let sy = (y + dy).checked_sub(1)?;
    let sx = (x + dx).checked_sub(1)?;
    (sy < h && sx < w).then_some(sy * w + sx)
}

/// Same-size 3×3 convolution with zero padding.
pub fn conv3x3(f: &FeatureMap, p: &ConvParams) -> Result<FeatureMap> {
    let (cin, cout) = (p.c_in(), p.c_out());
    if f.channels() != cin || p.kernel.rows() != 9 * cin || p.bias.shape() != (1, cout) {
        return Err(Error::Shape {
            op: "conv3x3",
            lhs: (f.height * f.width, f.channels()),
            rhs: p.kernel.shape(),
        });
    }
    let (h, w) = (f.height, f.width);
    let mut out = Matrix::zeros(h * w, cout);
    for y in 0..h {
        for x in 0..w {
            let orow = out.row_mut(y * w + x);
            orow.copy_from_slice(p.bias.row(0));
            for dy in 0..3 {
                for dx in 0..3 {
                    let Some(src) = tap_source(y, x, dy, dx, h, w) else { continue };
                    let tap = 3 * dy + dx;
                    for (ci, &v) in f.pixels.row(src).iter().enumerate() {
                        let krow = p.kernel.row(tap * cin + ci);
                        for (o, &k) in orow.iter_mut().zip(krow) {
                            *o += v * k;
                        }
                    }
                }
            }
        }
    }
    crate::meter::count_macs(h * w * 9 * cin * cout);
    FeatureMap::new(h, w, out)
}

/// Gradients of [`conv3x3`] with respect to its input and parameters.
pub fn conv3x3_backward(f: &FeatureMap, p: &ConvParams, upstream: &FeatureMap) -> Result<(FeatureMap, ConvParams)> {
    let (cin, cout) = (p.c_in(), p.c_out());
    if upstream.channels() != cout || (upstream.height, upstream.width) != (f.height, f.width) {
        return Err(invalid("conv3x3_backward: upstream does not match output shape"));
    }
    let (h, w) = (f.height, f.width);
    let mut d_in = Matrix::zeros(h * w, cin);
    let mut grads = ConvParams::zeros(cin, cout);
    for y in 0..h {
        for x in 0..w {
            let g = upstream.at(y, x);
            for (b, &gv) in grads.bias.row_mut(0).iter_mut().zip(g) {
                *b += gv;
            }
            for dy in 0..3 {
                for dx in 0..3 {
                    let Some(src) = tap_source(y, x, dy, dx, h, w) else { continue };
                    let tap = 3 * dy + dx;
                    for ci in 0..cin {
                        let v = f.pixels.get(src, ci);
                        let krow = tap * cin + ci;
                        let mut acc = 0.0;
                        for (co, &gv) in g.iter().enumerate() {
                            acc += gv * p.kernel.get(krow, co);
                            let kg = grads.kernel.get(krow, co) + v * gv;
                            grads.kernel.set(krow, co, kg);
                        }
                        let cur = d_in.get(src, ci);
                        d_in.set(src, ci, cur + acc);
                    }
                }
            }
        }
    }
    Ok((FeatureMap::new(h, w, d_in)?, grads))
}
