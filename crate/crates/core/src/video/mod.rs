//! Frames in, 72x128 grayscale segments out, plus the synthetic corpus.

pub mod frames;
pub mod pnm;
pub mod synth;

pub use frames::{
    frame_files, ingest_clip, load_frames, resize_bilinear, resize_bilinear_to, segment_clip, to_grayscale, Clip,
    Segment, FRAME_PIXELS, WINDOW_PIXELS,
};
pub use pnm::{decode_pnm, encode_pgm, read_pnm, write_pgm, RawFrame};
pub use synth::{synth_corpus, synth_video, Region, SynthConfig, SynthVideo};
