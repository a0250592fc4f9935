use thiserror::Error;

/// Error type shared by every module of the crate.
///
/// Variants are grouped so callers (the CLI in particular) can map them onto
/// config / data / runtime failure classes without string matching.
#[derive(Debug, Error)]
pub enum Error {
    #[error("xml parse error at line {line}, column {column}: {message}")]
    XmlParse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid annotation: {0}")]
    Validation(ValidationReport),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("captioning failed: {0}")]
    Caption(#[from] crate::caption::CaptionError),
    #[error("script client failed: {0}")]
    Script(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("training diverged: {0}")]
    NonFinite(String),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Broad failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Runtime,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => ErrorClass::Config,
            Error::XmlParse { .. }
            | Error::Validation(_)
            | Error::Data(_)
            | Error::Image(_)
            | Error::Json(_)
            | Error::Shape(_) => ErrorClass::Data,
            Error::Caption(_)
            | Error::Script(_)
            | Error::Protocol(_)
            | Error::Numerical(_)
            | Error::NonFinite(_)
            | Error::Io(_) => ErrorClass::Runtime,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// One violated invariant, named so tests and users can tell them apart.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// `xmin >= xmax` or `ymin >= ymax`.
    EmptyBox { element: String },
    /// Box leaves the page extent.
    OutOfPage { element: String },
    /// Page width or height is zero.
    EmptyPage,
    /// A dialogue link points at a text index that does not exist.
    DanglingTextLink { link: usize, text_index: usize },
    /// A dialogue link names a character that does not appear on the page.
    UnknownSpeaker { link: usize, character: String },
    /// Panel order indices are present but do not form a permutation.
    OrderNotPermutation,
    /// Some panels carry an order index and some do not.
    PartialOrder,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::EmptyBox { element } => write!(f, "empty or inverted box on {element}"),
            Violation::OutOfPage { element } => write!(f, "box outside page extent on {element}"),
            Violation::EmptyPage => write!(f, "page has zero width or height"),
            Violation::DanglingTextLink { link, text_index } => {
                write!(f, "link {link} references missing text {text_index}")
            }
            Violation::UnknownSpeaker { link, character } => {
                write!(f, "link {link} references unknown character {character:?}")
            }
            Violation::OrderNotPermutation => write!(f, "panel order indices are not a permutation"),
            Violation::PartialOrder => write!(f, "only some panels carry an order index"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join("; "))
    }
}
