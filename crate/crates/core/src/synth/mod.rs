//! Synthetic compositional scenes, their caption/QA token sequences, and mock
//! vision encoders that see only a subset of scene attributes.

mod encoder;
mod scene;
mod vocab;

pub use encoder::{desk_encoder_specs, encode_all, mock_encode, EncoderSpec, FeatureBundle, MockEncoder};
pub use scene::{generate_scenes, read_scenes, write_scenes, Attribute, Scene, ATTRIBUTES, VALUES};
pub use vocab::{caption_tokens, decode_caption, qa_tokens, CaptionTokens, Token, Vocabulary, CAPTION_PROMPT_LEN, VOCAB_SIZE};
