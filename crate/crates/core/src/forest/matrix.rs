use super::ForestError;

/// Dense column-major feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    n_rows: usize,
    n_cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn from_column_major(n_rows: usize, n_cols: usize, data: Vec<f64>) -> Result<Self, ForestError> {
        if data.len() != n_rows * n_cols {
            return Err(ForestError::Shape(format!(
                "{} values for a {n_rows} × {n_cols} matrix",
                data.len()
            )));
        }
        Ok(Self { n_rows, n_cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, ForestError> {
        let n_cols = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != n_cols) {
            return Err(ForestError::Shape("rows have different widths".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * n_cols);
        for c in 0..n_cols {
            data.extend(rows.iter().map(|r| r.as_ref()[c]));
        }
        Ok(Self { n_rows: rows.len(), n_cols, data })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn column(&self, c: usize) -> &[f64] {
        &self.data[c * self.n_rows..(c + 1) * self.n_rows]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[c * self.n_rows + r]
    }

    pub fn row(&self, r: usize) -> Vec<f64> {
        (0..self.n_cols).map(|c| self.get(r, c)).collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * self.n_cols);
        for c in 0..self.n_cols {
            let col = self.column(c);
            data.extend(rows.iter().map(|&r| col[r]));
        }
        Matrix { n_rows: rows.len(), n_cols: self.n_cols, data }
    }
}
