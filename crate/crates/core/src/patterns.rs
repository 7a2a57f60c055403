//! Illumination pattern libraries and nested sensing operators.
//!
//! A library stores raw binary masks (`n x N`, entries 0/1). A sensing operator
//! is a row selection of a library passed through the complementary transform
//! `2*phi - 1`, so unwhitened operators have entries in {-1, +1}.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::bits::BitMatrix;
use crate::error::{invalid, Result, SpxError};
use crate::rng::SpxRng;

/// Largest operator (entries) that `apply_columns` densifies before multiplying.
const DENSE_APPLY_LIMIT: usize = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PatternKind {
    Speckle,
    Hadamard,
}

impl fmt::Display for PatternKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Speckle => f.write_str("speckle"),
            Self::Hadamard => f.write_str("hadamard"),
        }
    }
}

impl std::str::FromStr for PatternKind {
    type Err = SpxError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "speckle" => Ok(Self::Speckle),
            "hadamard" => Ok(Self::Hadamard),
            other => Err(invalid(format!("unknown pattern kind `{other}`"))),
        }
    }
}

/// Everything needed to regenerate a library bit for bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LibraryId {
    pub kind: PatternKind,
    pub height: usize,
    pub width: usize,
    pub count: usize,
    pub seed: u64,
}

impl fmt::Display for LibraryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}x{}:n={}:seed={}",
            self.kind, self.height, self.width, self.count, self.seed
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternLibrary {
    id: LibraryId,
    patterns: BitMatrix,
}

impl PatternLibrary {
    /// Wraps an existing raw 0/1 matrix, e.g. one read back from disk.
    pub fn from_raw(
        kind: PatternKind,
        height: usize,
        width: usize,
        seed: u64,
        raw: &DMatrix<f64>,
    ) -> Result<Self> {
        if raw.ncols() != height * width {
            return Err(invalid(format!(
                "library has {} columns but {height}x{width} pixels",
                raw.ncols()
            )));
        }
        let mut bits = BitMatrix::zeros(raw.nrows(), raw.ncols());
        for i in 0..raw.nrows() {
            for j in 0..raw.ncols() {
                let v = raw[(i, j)];
                if v == 1.0 {
                    bits.set(i, j, true);
                } else if v != 0.0 {
                    return Err(SpxError::ContractViolation(format!(
                        "raw pattern entry ({i},{j}) = {v} is not binary"
                    )));
                }
            }
        }
        Ok(Self {
            id: LibraryId {
                kind,
                height,
                width,
                count: raw.nrows(),
                seed,
            },
            patterns: bits,
        })
    }

    pub fn id(&self) -> LibraryId {
        self.id
    }

    pub fn kind(&self) -> PatternKind {
        self.id.kind
    }

    pub fn height(&self) -> usize {
        self.id.height
    }

    pub fn width(&self) -> usize {
        self.id.width
    }

    pub fn count(&self) -> usize {
        self.id.count
    }

    pub fn seed(&self) -> u64 {
        self.id.seed
    }

    pub fn n_pixels(&self) -> usize {
        self.id.height * self.id.width
    }

    pub fn patterns(&self) -> &BitMatrix {
        &self.patterns
    }

    /// Raw library as a dense 0/1 matrix.
    pub fn raw_dense(&self) -> DMatrix<f64> {
        let p = &self.patterns;
        DMatrix::from_fn(p.rows(), p.cols(), |i, j| if p.get(i, j) { 1.0 } else { 0.0 })
    }

    /// Complementary (zero-mean) form of the whole library.
    pub fn effective(&self) -> DMatrix<f64> {
        sign_dense(&self.patterns)
    }
}

fn check_dims(h: usize, w: usize) -> Result<usize> {
    if h == 0 || w == 0 {
        return Err(invalid(format!("pattern size {h}x{w} has a zero dimension")));
    }
    h.checked_mul(w)
        .ok_or_else(|| invalid(format!("pattern size {h}x{w} overflows")))
}

/// I.i.d. Bernoulli(1/2) binary masks.
///
/// Row `r` consumes `ceil(N/64)` consecutive outputs of `SpxRng::new(seed)`;
/// pixel `j` is bit `j % 64` of word `j / 64` and unused high bits of the last
/// word are discarded.
pub fn gen_speckle(n: usize, h: usize, w: usize, seed: u64) -> Result<PatternLibrary> {
    let npix = check_dims(h, w)?;
    if n == 0 {
        return Err(invalid("speckle library needs at least one pattern"));
    }
    let words = npix.div_ceil(64);
    let mut rng = SpxRng::new(seed);
    let data: Vec<u64> = (0..n * words).map(|_| rng.next_u64()).collect();
    Ok(PatternLibrary {
        id: LibraryId {
            kind: PatternKind::Speckle,
            height: h,
            width: w,
            count: n,
            seed,
        },
        patterns: BitMatrix::from_row_words(n, npix, data),
    })
}

/// Leading `n` rows of the Sylvester Hadamard matrix of order `h*w`, stored
/// binary through `(v + 1) / 2`: entry `(i, j)` is 1 iff `popcount(i & j)` is even.
pub fn gen_hadamard(n: usize, h: usize, w: usize) -> Result<PatternLibrary> {
    let npix = check_dims(h, w)?;
    if !npix.is_power_of_two() {
        return Err(SpxError::UnsupportedSize(format!(
            "Hadamard order {npix} is not a power of two"
        )));
    }
    if n == 0 || n > npix {
        return Err(invalid(format!("Hadamard library size {n} not in 1..={npix}")));
    }
    let mut bits = BitMatrix::zeros(n, npix);
    for i in 0..n {
        for j in 0..npix {
            if (i & j).count_ones() % 2 == 0 {
                bits.set(i, j, true);
            }
        }
    }
    Ok(PatternLibrary {
        id: LibraryId {
            kind: PatternKind::Hadamard,
            height: h,
            width: w,
            count: n,
            seed: 0,
        },
        patterns: bits,
    })
}

/// Entrywise `2*phi - 1` of a raw binary matrix.
pub fn effective_form(raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some((k, v)) = raw.iter().enumerate().find(|(_, &v)| v != 0.0 && v != 1.0) {
        return Err(SpxError::ContractViolation(format!(
            "entry {k} = {v} of raw pattern matrix is not binary"
        )));
    }
    Ok(raw.map(|v| 2.0 * v - 1.0))
}

fn sign_dense(bits: &BitMatrix) -> DMatrix<f64> {
    DMatrix::from_fn(bits.rows(), bits.cols(), |i, j| {
        if bits.get(i, j) {
            1.0
        } else {
            -1.0
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SelectionPolicy {
    /// Library rows `0..m`; operators for growing `m` are nested.
    #[default]
    Prefix,
}

/// Matrix backing a sensing operator: packed signs until something (whitening,
/// custom construction) makes it real-valued.
#[derive(Debug, Clone, PartialEq)]
pub enum OperatorMatrix {
    /// Set bit = +1, clear bit = -1.
    Signs(BitMatrix),
    Dense(DMatrix<f64>),
}

impl OperatorMatrix {
    pub fn nrows(&self) -> usize {
        match self {
            Self::Signs(b) => b.rows(),
            Self::Dense(d) => d.nrows(),
        }
    }

    pub fn ncols(&self) -> usize {
        match self {
            Self::Signs(b) => b.cols(),
            Self::Dense(d) => d.ncols(),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match self {
            Self::Signs(b) => {
                if b.get(i, j) {
                    1.0
                } else {
                    -1.0
                }
            }
            Self::Dense(d) => d[(i, j)],
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Self::Signs(b) => sign_dense(b),
            Self::Dense(d) => d.clone(),
        }
    }

    fn prefix(&self, m: usize) -> Self {
        match self {
            Self::Signs(b) => Self::Signs(b.prefix_rows(m)),
            Self::Dense(d) => Self::Dense(d.rows(0, m).into_owned()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorSource {
    Library(LibraryId),
    /// Built directly from a matrix (tests, externally supplied operators).
    Custom,
}

/// Selected, complementary-transformed (and possibly whitened) operator `Phi_M`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensingOperator {
    source: OperatorSource,
    height: usize,
    width: usize,
    selection: Vec<usize>,
    effective: OperatorMatrix,
    whitened: bool,
}

/// Selects `m` rows of `lib` and applies the complementary transform.
pub fn select(lib: &PatternLibrary, m: usize, policy: SelectionPolicy) -> Result<SensingOperator> {
    if m == 0 || m > lib.count() {
        return Err(invalid(format!(
            "cannot select {m} patterns from a library of {}",
            lib.count()
        )));
    }
    if m > lib.n_pixels() {
        return Err(invalid(format!(
            "selecting {m} patterns for {} pixels gives a sampling rate above 1",
            lib.n_pixels()
        )));
    }
    let selection: Vec<usize> = match policy {
        SelectionPolicy::Prefix => (0..m).collect(),
    };
    Ok(SensingOperator {
        source: OperatorSource::Library(lib.id()),
        height: lib.height(),
        width: lib.width(),
        effective: OperatorMatrix::Signs(lib.patterns().prefix_rows(m)),
        selection,
        whitened: false,
    })
}

impl SensingOperator {
    /// Operator from an arbitrary real matrix over an `height x width` grid.
    /// The selection is the identity `0..M`.
    pub fn from_dense(matrix: DMatrix<f64>, height: usize, width: usize) -> Result<Self> {
        if matrix.nrows() == 0 {
            return Err(invalid("operator needs at least one row"));
        }
        if matrix.ncols() != height * width {
            return Err(invalid(format!(
                "operator has {} columns, grid is {height}x{width}",
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(invalid("operator has non-finite entries"));
        }
        Ok(Self {
            source: OperatorSource::Custom,
            height,
            width,
            selection: (0..matrix.nrows()).collect(),
            effective: OperatorMatrix::Dense(matrix),
            whitened: false,
        })
    }

    pub(crate) fn with_matrix(&self, matrix: DMatrix<f64>, whitened: bool) -> Self {
        debug_assert_eq!(matrix.shape(), (self.m(), self.n_pixels()));
        Self {
            source: self.source,
            height: self.height,
            width: self.width,
            selection: self.selection.clone(),
            effective: OperatorMatrix::Dense(matrix),
            whitened,
        }
    }

    pub fn source(&self) -> OperatorSource {
        self.source
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn m(&self) -> usize {
        self.effective.nrows()
    }

    pub fn n_pixels(&self) -> usize {
        self.effective.ncols()
    }

    pub fn rho(&self) -> f64 {
        self.m() as f64 / self.n_pixels() as f64
    }

    pub fn selection(&self) -> &[usize] {
        &self.selection
    }

    pub fn effective(&self) -> &OperatorMatrix {
        &self.effective
    }

    pub fn is_whitened(&self) -> bool {
        self.whitened
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        self.effective.to_dense()
    }

    /// Provenance string, e.g. `speckle:32x32:n=512:seed=7:m=64`.
    pub fn id(&self) -> String {
        let base = match self.source {
            OperatorSource::Library(id) => id.to_string(),
            OperatorSource::Custom => format!("custom:{}x{}", self.height, self.width),
        };
        let w = if self.whitened { ":whitened" } else { "" };
        format!("{base}:m={}{w}", self.m())
    }

    /// Leading `m` rows, i.e. the operator a prefix selection of size `m` gives.
    pub fn prefix(&self, m: usize) -> Result<Self> {
        if m == 0 || m > self.m() {
            return Err(invalid(format!("prefix {m} of an operator with {} rows", self.m())));
        }
        Ok(Self {
            source: self.source,
            height: self.height,
            width: self.width,
            selection: self.selection[..m].to_vec(),
            effective: self.effective.prefix(m),
            whitened: self.whitened,
        })
    }

    /// `Phi_M x`.
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.n_pixels(), "operator/vector size mismatch");
        match &self.effective {
            OperatorMatrix::Dense(d) => d * x,
            OperatorMatrix::Signs(b) => {
                let xs = x.as_slice();
                let total: f64 = xs.iter().sum();
                DVector::from_fn(b.rows(), |i, _| 2.0 * b.row_masked_sum(i, xs) - total)
            }
        }
    }

    /// `Phi_M^T r`.
    pub fn apply_transpose(&self, r: &DVector<f64>) -> DVector<f64> {
        assert_eq!(r.len(), self.m(), "operator/vector size mismatch");
        match &self.effective {
            OperatorMatrix::Dense(d) => d.tr_mul(r),
            OperatorMatrix::Signs(b) => {
                let total: f64 = r.iter().sum();
                let mut plus = vec![0.0; b.cols()];
                for i in 0..b.rows() {
                    let ri = r[i];
                    for (k, &word) in b.row_words(i).iter().enumerate() {
                        let mut w = word;
                        while w != 0 {
                            plus[k * 64 + w.trailing_zeros() as usize] += ri;
                            w &= w - 1;
                        }
                    }
                }
                DVector::from_iterator(b.cols(), plus.into_iter().map(|p| 2.0 * p - total))
            }
        }
    }

    /// `Phi_M X` for a matrix of column vectors.
    pub fn apply_columns(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.nrows(), self.n_pixels(), "operator/matrix size mismatch");
        match &self.effective {
            OperatorMatrix::Dense(d) => d * x,
            OperatorMatrix::Signs(b) if b.rows() * b.cols() <= DENSE_APPLY_LIMIT => {
                sign_dense(b) * x
            }
            OperatorMatrix::Signs(_) => {
                let mut out = DMatrix::zeros(self.m(), x.ncols());
                for t in 0..x.ncols() {
                    let col = self.apply(&x.column(t).into_owned());
                    out.set_column(t, &col);
                }
                out
            }
        }
    }
}
