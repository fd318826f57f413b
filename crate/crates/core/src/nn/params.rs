use std::ops::Range;

/// Named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub name: String,
    pub range: Range<usize>,
}

/// Every learnable scalar in one flat vector, indexed by named segments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    values: Vec<f64>,
    segments: Vec<Segment>,
    pub step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reserves `len` zeroed entries under `name`.
    pub fn allocate(&mut self, name: &str, len: usize) -> Range<usize> {
        let start = self.values.len();
        self.values.resize(start + len, 0.0);
        let range = start..start + len;
        self.segments.push(Segment {
            name: name.to_string(),
            range: range.clone(),
        });
        range
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<Range<usize>> {
        self.segments.iter().find(|s| s.name == name).map(|s| s.range.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
