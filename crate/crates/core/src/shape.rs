use std::fmt;

/// Ordered list of positive extents. Data is contiguous row-major.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Self {
        Shape(dims.to_vec())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Batch/channel layout helper: spatial extents after the [N, C] axes.
    pub fn spatial(&self) -> &[usize] {
        &self.0[2.min(self.0.len())..]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "[{}]", parts.join("x"))
    }
}

impl From<&[usize]> for Shape {
    fn from(dims: &[usize]) -> Self {
        Shape::new(dims)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numel_and_display() {
        let s = Shape::new(&[1, 2, 4, 4]);
        assert_eq!(s.numel(), 32);
        assert_eq!(s.to_string(), "[1x2x4x4]");
        assert_eq!(s.spatial(), &[4, 4]);
    }
}
