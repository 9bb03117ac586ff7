use crate::fxp::real::real_from_scaled;
use crate::fxp::{cast_payload, quantize, FixedPointType};
use crate::ir::op::window_out;
use crate::ir::tensor::{numel, strides};
use crate::ir::QTensor;

use super::{CmvmLayer, KernelError};

/// Sliding-window geometry over the leading (spatial) axes of a
/// channels-last tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub pad: Vec<[usize; 2]>,
}

impl Window {
    pub fn out_spatial(&self, spatial: &[usize]) -> Result<Vec<usize>, String> {
        if spatial.len() != self.kernel.len() {
            return Err(format!("{} spatial axes for a rank-{} window", spatial.len(), self.kernel.len()));
        }
        spatial
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                window_out(d, self.kernel[i], self.stride[i], self.pad[i])
                    .ok_or_else(|| format!("axis {i}: input {d} kernel {} stride {} pad {:?}", self.kernel[i], self.stride[i], self.pad[i]))
            })
            .collect()
    }

    /// For each output position, the flat spatial input index under each
    /// kernel tap (`None` in padding). Taps are ordered row-major.
    pub fn taps(&self, spatial: &[usize]) -> Result<Vec<Vec<Option<usize>>>, String> {
        let out = self.out_spatial(spatial)?;
        let in_strides = strides(spatial);
        let out_strides = strides(&out);
        let k_strides = strides(&self.kernel);
        let n_taps = numel(&self.kernel);
        let mut all = Vec::with_capacity(numel(&out));
        for pos in 0..numel(&out) {
            let mut taps = Vec::with_capacity(n_taps);
            for tap in 0..n_taps {
                let mut flat = 0usize;
                let mut inside = true;
                for axis in 0..spatial.len() {
                    let o = (pos / out_strides[axis]) % out[axis];
                    let k = (tap / k_strides[axis]) % self.kernel[axis];
                    let idx = (o * self.stride[axis] + k) as isize - self.pad[axis][0] as isize;
                    if idx < 0 || idx as usize >= spatial[axis] {
                        inside = false;
                        break;
                    }
                    flat += idx as usize * in_strides[axis];
                }
                taps.push(if inside { Some(flat) } else { None });
            }
            all.push(taps);
        }
        Ok(all)
    }
}

/// Patch matrix: one column per output position, each of length
/// `taps·C` ordered (tap, channel). Padding contributes zeros.
pub fn im2col(x: &QTensor, window: &Window) -> Result<(Vec<Vec<i128>>, Vec<usize>), String> {
    let rank = x.shape.len();
    if rank < 2 {
        return Err(format!("im2col needs a spatial tensor, got shape {:?}", x.shape));
    }
    let c = x.shape[rank - 1];
    let spatial = &x.shape[..rank - 1];
    let out = window.out_spatial(spatial)?;
    let cols = window
        .taps(spatial)?
        .into_iter()
        .map(|taps| {
            let mut col = Vec::with_capacity(taps.len() * c);
            for t in taps {
                match t {
                    Some(s) => col.extend_from_slice(&x.payloads[s * c..(s + 1) * c]),
                    None => col.extend(std::iter::repeat_n(0, c)),
                }
            }
            col
        })
        .collect();
    Ok((cols, out))
}

/// Conv kernel `[k.., C, F]` as a `[F, taps·C]` matrix.
pub fn conv_matrix(kernel: &QTensor) -> QTensor {
    let r = kernel.shape.len();
    let (c, f) = (kernel.shape[r - 2], kernel.shape[r - 1]);
    let taps = numel(&kernel.shape[..r - 2]);
    let n = taps * c;
    let mut payloads = vec![0; f * n];
    for t in 0..taps {
        for ci in 0..c {
            for fi in 0..f {
                payloads[fi * n + t * c + ci] = kernel.payloads[(t * c + ci) * f + fi];
            }
        }
    }
    QTensor::new(vec![f, n], payloads, kernel.format)
}

/// Depthwise kernel `[k.., C, 1]` as a block-sparse `[C, taps·C]` matrix.
pub fn depthwise_matrix(kernel: &QTensor) -> QTensor {
    let r = kernel.shape.len();
    let c = kernel.shape[r - 2];
    let taps = numel(&kernel.shape[..r - 2]);
    let n = taps * c;
    let mut payloads = vec![0; c * n];
    for t in 0..taps {
        for ci in 0..c {
            payloads[ci * n + t * c + ci] = kernel.payloads[t * c + ci];
        }
    }
    QTensor::new(vec![c, n], payloads, kernel.format)
}

/// Runs `layer` on every column and lays the results out channels-last.
pub(crate) fn cmvm_columns(cols: &[Vec<i128>], x_type: FixedPointType, layer: &CmvmLayer) -> Result<Vec<i128>, KernelError> {
    let mut out = Vec::with_capacity(cols.len() * layer.plan.m);
    for col in cols {
        out.extend(layer.apply(col, x_type)?);
    }
    Ok(out)
}

pub fn conv_forward(x: &QTensor, window: &Window, layer: &CmvmLayer) -> Result<QTensor, KernelError> {
    let (cols, out_spatial) = im2col(x, window).map_err(|reason| KernelError::BadGeometry { node: layer.name.clone(), reason })?;
    let positions = cols.len();
    if positions % layer.pf != 0 {
        return Err(KernelError::IndivisiblePF { node: layer.name.clone(), positions, pf: layer.pf });
    }
    let payloads = cmvm_columns(&cols, x.ty(), layer)?;
    let mut shape = out_spatial;
    shape.push(layer.plan.m);
    Ok(QTensor::fixed(shape, payloads, layer.result))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Max is exact; average sums exactly, casts to `accum`, divides by the
/// number of non-padding taps and rounds into `result`.
pub fn pool_forward(
    x: &QTensor,
    kind: PoolKind,
    window: &Window,
    accum: FixedPointType,
    result: FixedPointType,
) -> Result<QTensor, String> {
    let rank = x.shape.len();
    let c = x.shape[rank - 1];
    let spatial = &x.shape[..rank - 1];
    let out = window.out_spatial(spatial)?;
    let e = x.ty().lsb_exp();
    let mut payloads = Vec::with_capacity(numel(&out) * c);
    for taps in window.taps(spatial)? {
        let live: Vec<usize> = taps.into_iter().flatten().collect();
        for ch in 0..c {
            let vals = live.iter().map(|s| x.payloads[s * c + ch]);
            let p = match kind {
                PoolKind::Max => {
                    let m = vals.max().unwrap_or(0);
                    cast_payload(m, e, result)
                }
                PoolKind::Avg => {
                    let sum: i128 = vals.sum();
                    let acc = cast_payload(sum, e, accum);
                    let count = live.len().max(1) as i128;
                    let avg = real_from_scaled(acc, accum.lsb_exp()) / crate::fxp::real::real_from_int(count);
                    quantize(&avg, result).payload()
                }
            };
            payloads.push(p);
        }
    }
    let mut shape = out;
    shape.push(c);
    Ok(QTensor::fixed(shape, payloads, result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fxp::WeightFormat;

    fn t(s: &str) -> FixedPointType {
        s.parse().unwrap()
    }

    #[test]
    fn one_by_one_is_reshape() {
        let x = QTensor::fixed(vec![2, 2, 3], (0..12).collect(), t("fixed<8,8,s>"));
        let w = Window { kernel: vec![1, 1], stride: vec![1, 1], pad: vec![[0, 0]; 2] };
        let (cols, out) = im2col(&x, &w).unwrap();
        assert_eq!(out, vec![2, 2]);
        assert_eq!(cols.concat(), x.payloads);
    }

    #[test]
    fn three_by_three_valid_on_four() {
        let x = QTensor::fixed(vec![4, 4, 1], (0..16).collect(), t("fixed<8,8,s>"));
        let w = Window { kernel: vec![3, 3], stride: vec![1, 1], pad: vec![[0, 0]; 2] };
        let (cols, out) = im2col(&x, &w).unwrap();
        assert_eq!(out, vec![2, 2]);
        assert_eq!(cols.len(), 4);
        assert!(cols.iter().all(|c| c.len() == 9));
        assert_eq!(cols[0], vec![0, 1, 2, 4, 5, 6, 8, 9, 10]);
        assert_eq!(cols[3], vec![5, 6, 7, 9, 10, 11, 13, 14, 15]);
    }

    #[test]
    fn padding_is_zero() {
        let x = QTensor::fixed(vec![2, 1], vec![5, 7], t("fixed<8,8,s>"));
        let w = Window { kernel: vec![3], stride: vec![1], pad: vec![[1, 1]] };
        let (cols, _) = im2col(&x, &w).unwrap();
        assert_eq!(cols, vec![vec![0, 5, 7], vec![5, 7, 0]]);
        let bad = Window { kernel: vec![5], stride: vec![1], pad: vec![[0, 0]] };
        assert!(im2col(&x, &bad).is_err());
    }

    #[test]
    fn avg_pool_rounding() {
        // {1.0, 0.5} at LSB 0.25 with TRN
        let x = QTensor::fixed(vec![2, 1], vec![4, 2], t("fixed<6,4,s>"));
        let w = Window { kernel: vec![2], stride: vec![2], pad: vec![[0, 0]] };
        let y = pool_forward(&x, PoolKind::Avg, &w, t("fixed<8,5,s>"), t("fixed<6,4,s>")).unwrap();
        assert_eq!(y.reals()[0], crate::fxp::real::parse_real("0.75").unwrap());
        let eq = QTensor::fixed(vec![2, 1], vec![3, 3], t("fixed<6,4,s>"));
        let y = pool_forward(&eq, PoolKind::Max, &w, t("fixed<8,5,s>"), t("fixed<6,4,s>")).unwrap();
        assert_eq!(y.payloads, vec![3]);
    }

    #[test]
    fn conv_matrix_layout() {
        // k=1 taps, C=2, F=3: matrix[f][c] = kernel[c][f]
        let k = QTensor::new(vec![1, 2, 3], vec![1, 2, 3, 4, 5, 6], WeightFormat::Fixed(t("fixed<8,8,s>")));
        let m = conv_matrix(&k);
        assert_eq!(m.shape, vec![3, 2]);
        assert_eq!(m.payloads, vec![1, 4, 2, 5, 3, 6]);
        let d = depthwise_matrix(&QTensor::new(vec![2, 2, 1], vec![1, 2, 3, 4], WeightFormat::Fixed(t("fixed<8,8,s>"))));
        assert_eq!(d.payloads, vec![1, 0, 3, 0, 0, 2, 0, 4]);
    }
}
