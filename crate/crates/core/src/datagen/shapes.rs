use serde::{Deserialize, Serialize};

/// Parametric foreground silhouettes, one per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    HBar,
    Disk,
    VBar,
    Square,
    Cross,
    Ring,
    Diamond,
    Triangle,
    Frame,
    Diagonal,
    AntiDiagonal,
    Dot,
}

impl Shape {
    /// Class order of generated datasets. Even positions become base classes.
    pub const FAMILIES: [Shape; 12] = [
        Shape::HBar,
        Shape::Diagonal,
        Shape::VBar,
        Shape::AntiDiagonal,
        Shape::Disk,
        Shape::Square,
        Shape::Cross,
        Shape::Ring,
        Shape::Diamond,
        Shape::Triangle,
        Shape::Frame,
        Shape::Dot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Shape::HBar => "hbar",
            Shape::Disk => "disk",
            Shape::VBar => "vbar",
            Shape::Square => "square",
            Shape::Cross => "cross",
            Shape::Ring => "ring",
            Shape::Diamond => "diamond",
            Shape::Triangle => "triangle",
            Shape::Frame => "frame",
            Shape::Diagonal => "diagonal",
            Shape::AntiDiagonal => "antidiagonal",
            Shape::Dot => "dot",
        }
    }

    /// Whether offset `(dy, dx)` from the shape centre lies inside a shape of radius `s`.
    pub fn contains(self, dy: f64, dx: f64, s: f64) -> bool {
        let (ay, ax) = (dy.abs(), dx.abs());
        let r = (dy * dy + dx * dx).sqrt();
        let thin = (s / 3.0).max(0.75);
        match self {
            Shape::HBar => ay <= thin && ax <= s * 1.6,
            Shape::VBar => ax <= thin && ay <= s * 1.6,
            Shape::Disk => r <= s,
            Shape::Square => ay.max(ax) <= s * 0.9,
            Shape::Cross => (ay <= thin && ax <= s * 1.3) || (ax <= thin && ay <= s * 1.3),
            Shape::Ring => r <= s * 1.2 && r >= s * 1.2 - thin * 1.5,
            Shape::Diamond => ay + ax <= s * 1.2,
            Shape::Triangle => dy >= -s && dy <= s && ax <= (dy + s) * 0.6,
            Shape::Frame => {
                let m = ay.max(ax);
                m <= s * 1.1 && m >= s * 1.1 - thin * 1.5
            }
            Shape::Diagonal => (dy - dx).abs() <= thin * 1.2 && ay <= s * 1.3 && ax <= s * 1.3,
            Shape::AntiDiagonal => (dy + dx).abs() <= thin * 1.2 && ay <= s * 1.3 && ax <= s * 1.3,
            Shape::Dot => r <= s * 0.5,
        }
    }
}
