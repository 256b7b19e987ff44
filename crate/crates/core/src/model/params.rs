use ndarray::{ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named row-major matrices packed into one flat vector.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Layout {
    specs: Vec<TensorSpec>,
    len: usize,
}

impl Layout {
    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        let id = ParamId(self.specs.len());
        self.specs.push(TensorSpec {
            name: name.into(),
            rows,
            cols,
            offset: self.len,
        });
        self.len += rows * cols;
        id
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn spec(&self, id: ParamId) -> &TensorSpec {
        &self.specs[id.0]
    }

    pub fn range(&self, id: ParamId) -> std::ops::Range<usize> {
        let s = &self.specs[id.0];
        s.offset..s.offset + s.len()
    }

    pub fn view<'a>(&self, data: &'a [f64], id: ParamId) -> ArrayView2<'a, f64> {
        let s = &self.specs[id.0];
        ArrayView2::from_shape((s.rows, s.cols), &data[self.range(id)]).expect("layout shape")
    }

    pub fn view_mut<'a>(&self, data: &'a mut [f64], id: ParamId) -> ArrayViewMut2<'a, f64> {
        let s = &self.specs[id.0];
        let r = self.range(id);
        ArrayViewMut2::from_shape((s.rows, s.cols), &mut data[r]).expect("layout shape")
    }
}
