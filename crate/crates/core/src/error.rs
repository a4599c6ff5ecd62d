use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("pixel ({x}, {y}) lies outside box ({x1}, {y1}, {x2}, {y2})")]
    PixelOutsideBox {
        x: f32,
        y: f32,
        x1: f32,
        y1: f32,
        x2: f32,
        y2: f32,
    },

    #[error("invalid box ({0}, {1}, {2}, {3})")]
    InvalidBox(f32, f32, f32, f32),

    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    Shape {
        what: String,
        expected: String,
        got: String,
    },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("class {0} is not a thing class")]
    NotThingClass(u16),

    #[error("could not place instance {instance} after {attempts} attempts")]
    Placement { instance: usize, attempts: usize },
}

impl Error {
    pub(crate) fn shape(what: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            what: what.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
