use serde::{Deserialize, Serialize};

/// Dense row-major matrix of `f64`. A vector is a `len x 1` tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data does not match shape");
        Tensor { rows, cols, data }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let rows = data.len();
        Tensor {
            rows,
            cols: 1,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Append a row to a matrix with `cols` columns.
    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.cols);
        self.data.extend_from_slice(row);
        self.rows += 1;
    }
}

/// A trainable tensor with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
    /// Scale applied to optimizer updates of this parameter.
    pub relative_lr: f64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let (r, c) = value.shape();
        Parameter {
            name: name.into(),
            value,
            grad: Tensor::zeros(r, c),
            trainable: true,
            relative_lr: 1.0,
        }
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Anything that can lend parameters to a graph by id.
pub trait ParamStore {
    fn num_params(&self) -> usize;
    fn param(&self, id: ParamId) -> &Parameter;
    fn param_mut(&mut self, id: ParamId) -> &mut Parameter;

    fn param_ids(&self) -> Vec<ParamId> {
        (0..self.num_params()).map(ParamId).collect()
    }
}

/// Plain ordered collection of parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, p: Parameter) -> ParamId {
        self.params.push(p);
        ParamId(self.params.len() - 1)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }
}

impl ParamStore for ParamSet {
    fn num_params(&self) -> usize {
        self.params.len()
    }

    fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    fn param_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }
}
