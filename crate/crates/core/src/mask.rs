//! Binary masks, clicks and normalised image tensors.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::scalar::Scalar;

/// Binary `H × W` mask.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl fmt::Debug for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mask({}x{}, {} set)", self.height, self.width, self.count())
    }
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                bits.push(f(i, j));
            }
        }
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(
                "mask",
                format!("{height}x{width} needs {} bits, got {}", height * width, bits.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.width + j] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn check_same_dims(&self, other: &Mask, op: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(
                op,
                format!(
                    "{}x{} vs {}x{}",
                    self.height, self.width, other.height, other.width
                ),
            ));
        }
        Ok(())
    }

    /// `self AND NOT other`.
    pub fn and_not(&self, other: &Mask) -> Result<Mask> {
        self.check_same_dims(other, "and_not")?;
        Ok(Mask {
            height: self.height,
            width: self.width,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| a && !b)
                .collect(),
        })
    }

    /// Positions of set pixels, row-major.
    pub fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(idx, _)| (idx / w, idx % w))
    }

    /// `{0,1}` values as a `[H, W]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_parts(
            vec![self.height, self.width],
            self.bits
                .iter()
                .map(|&b| if b { T::one() } else { T::zero() })
                .collect(),
        )
    }

    /// Window `[top, top+height) × [left, left+width)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Mask> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::shape(
                "crop",
                format!(
                    "window {height}x{width}@({top},{left}) outside {}x{}",
                    self.height, self.width
                ),
            ));
        }
        Ok(Mask::from_fn(height, width, |i, j| self.get(top + i, left + j)))
    }
}

/// Which side of the object boundary a click asserts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "+")]
    Positive,
    #[serde(rename = "-")]
    Negative,
}

impl Label {
    pub fn from_membership(foreground: bool) -> Self {
        if foreground {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Positive => "+",
            Label::Negative => "-",
        })
    }
}

/// One user interaction: a pixel `(row, col)` and its label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Click {
    pub row: usize,
    pub col: usize,
    pub label: Label,
}

impl Click {
    pub fn new(row: usize, col: usize, label: Label) -> Self {
        Self { row, col, label }
    }

    pub fn positive(row: usize, col: usize) -> Self {
        Self::new(row, col, Label::Positive)
    }

    pub fn negative(row: usize, col: usize) -> Self {
        Self::new(row, col, Label::Negative)
    }
}

/// Normalised RGB image stored as a `[H, W, 3]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor<T> {
    tensor: Tensor<T>,
}

impl<T: Scalar> ImageTensor<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        if tensor.rank() != 3 || tensor.shape()[2] != 3 {
            return Err(Error::shape(
                "image",
                format!("expected [H, W, 3], got {:?}", tensor.shape()),
            ));
        }
        Ok(Self { tensor })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            tensor: Tensor::zeros(vec![height, width, 3]),
        }
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    pub fn pixel(&self, i: usize, j: usize) -> [T; 3] {
        let d = &self.tensor.data()[(i * self.width() + j) * 3..][..3];
        [d[0], d[1], d[2]]
    }

    pub fn cast<U: Scalar>(&self) -> ImageTensor<U> {
        ImageTensor {
            tensor: self.tensor.cast(),
        }
    }

    /// Window `[top, top+height) × [left, left+width)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height() || left + width > self.width() {
            return Err(Error::shape(
                "crop",
                format!(
                    "window {height}x{width}@({top},{left}) outside {}x{}",
                    self.height(),
                    self.width()
                ),
            ));
        }
        let w = self.width();
        let mut data = Vec::with_capacity(height * width * 3);
        for i in top..top + height {
            data.extend_from_slice(&self.tensor.data()[(i * w + left) * 3..(i * w + left + width) * 3]);
        }
        Ok(Self {
            tensor: Tensor::from_parts(vec![height, width, 3], data),
        })
    }
}

/// Reflect (mirror without repeating the edge) index into `[0, n)`.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Reflect-pads bottom and right so both sides reach the given size.
pub fn reflect_pad_image<T: Scalar>(img: &ImageTensor<T>, height: usize, width: usize) -> ImageTensor<T> {
    let (h, w) = img.dims();
    let mut data = Vec::with_capacity(height * width * 3);
    for i in 0..height {
        let si = reflect_index(i as isize, h);
        for j in 0..width {
            let sj = reflect_index(j as isize, w);
            data.extend_from_slice(&img.pixel(si, sj));
        }
    }
    ImageTensor {
        tensor: Tensor::from_parts(vec![height, width, 3], data),
    }
}

pub fn reflect_pad_mask(mask: &Mask, height: usize, width: usize) -> Mask {
    let (h, w) = mask.dims();
    Mask::from_fn(height, width, |i, j| {
        mask.get(reflect_index(i as isize, h), reflect_index(j as isize, w))
    })
}
