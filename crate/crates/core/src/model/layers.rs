use rand::Rng;

use super::params::{Binding, Init, Param, ParamGroup, ParamStore};
use crate::error::Result;
use crate::tensor::{Tensor, Var};

/// A square-kernel convolution whose weights live in a [`ParamStore`] under
/// `<name>.weight` and `<name>.bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    pub fn new(
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            name: name.into(),
            c_in,
            c_out,
            kernel,
            stride,
            padding,
        }
    }

    /// Stride-1 layer that preserves spatial extents (odd kernels).
    pub fn same(name: impl Into<String>, c_in: usize, c_out: usize, kernel: usize) -> Self {
        Self::new(name, c_in, c_out, kernel, 1, kernel / 2)
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.kernel, self.kernel]
    }

    pub fn register<R: Rng>(&self, store: &mut ParamStore, group: ParamGroup, init: Init, rng: &mut R) -> Result<()> {
        let k2 = self.kernel * self.kernel;
        let weight = init.sample(&self.weight_shape(), self.c_in * k2, self.c_out * k2, rng);
        store.insert(
            self.weight_name(),
            Param {
                value: weight,
                group,
                decay: true,
            },
        )?;
        store.insert(
            self.bias_name(),
            Param {
                value: Tensor::zeros(&[self.c_out]),
                group,
                decay: false,
            },
        )
    }

    pub fn forward(&self, b: &Binding<'_>, x: Var) -> Result<Var> {
        let (w, bias) = (b.var(&self.weight_name())?, b.var(&self.bias_name())?);
        b.graph().conv2d(x, w, bias, self.stride, self.padding)
    }

    /// Spatial extent after this layer, if the kernel fits.
    pub fn output_extent(&self, input: usize) -> Option<usize> {
        crate::tensor::conv2d_output_extent(input, self.kernel, self.stride, self.padding).filter(|&e| e > 0)
    }
}
