use alloc::boxed::Box;
use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("input too small: {height}x{width}, both sides must be at least {min}")]
    InputTooSmall { height: usize, width: usize, min: usize },

    #[error("patch side {patch} does not fit a {height}x{width} feature map")]
    PatchTooLarge { patch: usize, height: usize, width: usize },

    #[error("k = {k} exceeds the {available} usable keys")]
    NeighborCount { k: usize, available: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("cannot compose patches: {0}")]
    Composition(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing model parameter `{0}`")]
    MissingParameter(String),

    #[error("incompatible parameters: {0}")]
    Incompatible(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{stage}: {source}")]
    Stage { stage: &'static str, source: Box<Error> },
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl core::fmt::Display,
        found: impl core::fmt::Display,
    ) -> Self {
        use alloc::string::ToString;
        Error::Shape {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    /// Root cause with stage labels peeled off.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
