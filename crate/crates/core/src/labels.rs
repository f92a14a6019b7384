//! Per-pixel class maps.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major `[H,W]` map of class ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Dimension(format!(
                "label map {h}x{w} needs {} entries, got {}",
                h * w,
                data.len()
            )));
        }
        Ok(LabelMap { h, w, data })
    }

    pub fn filled(h: usize, w: usize, class: u8) -> Self {
        LabelMap {
            h,
            w,
            data: vec![class; h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.w + col]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().find(|&&l| l as usize >= num_classes) {
            Some(&l) => Err(Error::Data(format!(
                "label {l} out of range for {num_classes} classes"
            ))),
            None => Ok(()),
        }
    }
}

/// Arg-max over the channel axis of `[N_c,H,W]` scores; ties go to the
/// lowest class index.
pub fn predict_labels(scores: &Tensor) -> Result<LabelMap> {
    let s = scores.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("expected [N_c,H,W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let hw = h * w;
    let x = scores.data();
    let data = (0..hw)
        .map(|p| {
            let mut best = 0usize;
            for k in 1..c {
                if x[k * hw + p] > x[best * hw + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_gives_hot_index() {
        let mut d = vec![0.0; 3 * 2];
        d[2 * 2] = 1.0; // pixel 0 -> class 2
        d[2 + 1] = 1.0; // pixel 1 -> class 1
        let t = Tensor::new(vec![3, 1, 2], d).unwrap();
        assert_eq!(predict_labels(&t).unwrap().data(), &[2, 1]);
    }

    #[test]
    fn ties_go_to_lowest_class() {
        let t = Tensor::full(&[5, 2, 3], 0.2);
        assert!(predict_labels(&t).unwrap().data().iter().all(|&l| l == 0));
    }

    #[test]
    fn out_of_range_label_is_data_error() {
        let m = LabelMap::new(1, 2, vec![0, 5]).unwrap();
        assert!(matches!(m.check_classes(5), Err(Error::Data(_))));
    }
}
