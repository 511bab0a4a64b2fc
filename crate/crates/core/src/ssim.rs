//! SSIM with the standard 11×11 Gaussian window (σ = 1.5, K1 = 0.01,
//! K2 = 0.03, dynamic range 1), evaluated over valid windows only (no
//! padding) and averaged across the three channels, plus the analytic
//! gradient with respect to the first image.

use crate::buffers::{check_same_shape, ImageRgb};
use crate::error::{Error, Result};
use crate::math::Vec3;

pub const WINDOW: usize = 11;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Normalized 1D Gaussian window, σ = 1.5.
pub fn gaussian_window() -> [f64; WINDOW] {
    let sigma = 1.5;
    let mut w = [0.0; WINDOW];
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - (WINDOW as f64 - 1.0) / 2.0;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

fn check_size(img: &ImageRgb) -> Result<()> {
    if img.width < WINDOW || img.height < WINDOW {
        return Err(Error::Dimension(format!(
            "image {}x{} smaller than the {WINDOW}x{WINDOW} ssim window",
            img.width, img.height
        )));
    }
    Ok(())
}

/// Separable valid convolution with the Gaussian window.
/// Input W×H, output (W−10)×(H−10), row-major.
fn conv_valid(plane: &[f64], width: usize, height: usize, win: &[f64; WINDOW]) -> Vec<f64> {
    let ow = width - WINDOW + 1;
    let oh = height - WINDOW + 1;
    // horizontal pass: ow x height
    let mut tmp = vec![0.0; ow * height];
    for y in 0..height {
        for x in 0..ow {
            let mut acc = 0.0;
            for k in 0..WINDOW {
                acc += win[k] * plane[y * width + x + k];
            }
            tmp[y * ow + x] = acc;
        }
    }
    // vertical pass: ow x oh
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for k in 0..WINDOW {
                acc += win[k] * tmp[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Transpose of `conv_valid`: scatter a (W−10)×(H−10) map back onto the
/// full W×H grid with the same separable weights.
fn scatter_full(small: &[f64], width: usize, height: usize, win: &[f64; WINDOW]) -> Vec<f64> {
    let ow = width - WINDOW + 1;
    let oh = height - WINDOW + 1;
    // vertical transpose: ow x height
    let mut tmp = vec![0.0; ow * height];
    for y in 0..oh {
        for x in 0..ow {
            let v = small[y * ow + x];
            if v != 0.0 {
                for k in 0..WINDOW {
                    tmp[(y + k) * ow + x] += win[k] * v;
                }
            }
        }
    }
    // horizontal transpose: width x height
    let mut out = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            if v != 0.0 {
                for k in 0..WINDOW {
                    out[y * width + x + k] += win[k] * v;
                }
            }
        }
    }
    out
}

struct ChannelStats {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    sigma_x: Vec<f64>,
    sigma_y: Vec<f64>,
    sigma_xy: Vec<f64>,
}

fn stats(
    x: &[f64],
    y: &[f64],
    width: usize,
    height: usize,
    win: &[f64; WINDOW],
) -> ChannelStats {
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mu_x = conv_valid(x, width, height, win);
    let mu_y = conv_valid(y, width, height, win);
    let mut sigma_x = conv_valid(&xx, width, height, win);
    let mut sigma_y = conv_valid(&yy, width, height, win);
    let mut sigma_xy = conv_valid(&xy, width, height, win);
    for i in 0..mu_x.len() {
        sigma_x[i] -= mu_x[i] * mu_x[i];
        sigma_y[i] -= mu_y[i] * mu_y[i];
        sigma_xy[i] -= mu_x[i] * mu_y[i];
    }
    ChannelStats { mu_x, mu_y, sigma_x, sigma_y, sigma_xy }
}

/// Mean SSIM over all valid windows and channels.
pub fn ssim(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    check_same_shape(a, b, "ssim inputs")?;
    check_size(a)?;
    let win = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        let x = a.channel(ch);
        let y = b.channel(ch);
        let st = stats(&x, &y, a.width, a.height, &win);
        for i in 0..st.mu_x.len() {
            let num = (2.0 * st.mu_x[i] * st.mu_y[i] + C1) * (2.0 * st.sigma_xy[i] + C2);
            let den = (st.mu_x[i] * st.mu_x[i] + st.mu_y[i] * st.mu_y[i] + C1)
                * (st.sigma_x[i] + st.sigma_y[i] + C2);
            total += num / den;
        }
        count += st.mu_x.len();
    }
    Ok(total / count as f64)
}

/// SSIM plus the gradient of the mean SSIM with respect to image `a`.
pub fn ssim_with_grad(a: &ImageRgb, b: &ImageRgb) -> Result<(f64, Vec<Vec3>)> {
    check_same_shape(a, b, "ssim inputs")?;
    check_size(a)?;
    let win = gaussian_window();
    let (width, height) = (a.width, a.height);
    let n_win = (width - WINDOW + 1) * (height - WINDOW + 1);
    let norm = 1.0 / (3.0 * n_win as f64);

    let mut total = 0.0;
    let mut grad = vec![Vec3::zeros(); width * height];
    for ch in 0..3 {
        let x = a.channel(ch);
        let y = b.channel(ch);
        let st = stats(&x, &y, width, height, &win);

        // per-window partials of S w.r.t. (mu_x, sigma_x, sigma_xy)
        let mut g_mu = vec![0.0; n_win];
        let mut g_sx = vec![0.0; n_win];
        let mut g_sxy = vec![0.0; n_win];
        let mut g_sx_mu = vec![0.0; n_win]; // g_sx * mu_x, for the scatter form
        let mut g_sxy_muy = vec![0.0; n_win]; // g_sxy * mu_y
        for i in 0..n_win {
            let (mx, my) = (st.mu_x[i], st.mu_y[i]);
            let a_t = 2.0 * mx * my + C1;
            let b_t = 2.0 * st.sigma_xy[i] + C2;
            let c_t = mx * mx + my * my + C1;
            let d_t = st.sigma_x[i] + st.sigma_y[i] + C2;
            let s = (a_t * b_t) / (c_t * d_t);
            total += s;
            let dmu = 2.0 * my * b_t / (c_t * d_t) - 2.0 * mx * s / c_t;
            let dsx = -s / d_t;
            let dsxy = 2.0 * a_t / (c_t * d_t);
            g_mu[i] = dmu;
            g_sx[i] = dsx;
            g_sxy[i] = dsxy;
            g_sx_mu[i] = dsx * mx;
            g_sxy_muy[i] = dsxy * my;
        }

        // dS/dx_k = G^T g_mu + 2 x (G^T g_sx) - 2 G^T(g_sx mu_x)
        //                 + y (G^T g_sxy) - G^T(g_sxy mu_y)
        let t_mu = scatter_full(&g_mu, width, height, &win);
        let t_sx = scatter_full(&g_sx, width, height, &win);
        let t_sx_mu = scatter_full(&g_sx_mu, width, height, &win);
        let t_sxy = scatter_full(&g_sxy, width, height, &win);
        let t_sxy_muy = scatter_full(&g_sxy_muy, width, height, &win);
        for k in 0..width * height {
            grad[k][ch] = norm
                * (t_mu[k] + 2.0 * x[k] * t_sx[k] - 2.0 * t_sx_mu[k] + y[k] * t_sxy[k]
                    - t_sxy_muy[k]);
        }
    }
    Ok((total * norm, grad))
}

/// DSSIM = (1 − SSIM) / 2 with gradient on `a`.
pub fn dssim_with_grad(a: &ImageRgb, b: &ImageRgb) -> Result<(f64, Vec<Vec3>)> {
    let (s, mut g) = ssim_with_grad(a, b)?;
    for v in g.iter_mut() {
        *v *= -0.5;
    }
    Ok(((1.0 - s) / 2.0, g))
}
