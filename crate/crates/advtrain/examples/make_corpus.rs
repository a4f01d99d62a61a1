//! Regenerate the checked-in fuzz corpus seeds.
//!
//! Usage: cargo run -p advtrain --example make_corpus [corpus-dir]
//! (default output directory: fuzz/corpus)

use advtrain::dataset::{idx_images_bytes, idx_labels_bytes, IdxImages};
use advtrain::{init_params, write_checkpoint_bytes, ModelConfig, RngState};

fn main() {
    let root = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "fuzz/corpus".to_string());
    let root = std::path::PathBuf::from(root);

    let write = |target: &str, name: &str, bytes: &[u8]| {
        let dir = root.join(target);
        std::fs::create_dir_all(&dir).expect("create corpus dir");
        let path = dir.join(name);
        std::fs::write(&path, bytes).expect("write seed");
        println!("wrote {} ({} bytes)", path.display(), bytes.len());
    };

    let tiny = IdxImages {
        count: 2,
        rows: 3,
        cols: 3,
        pixels: (0u8..18).collect(),
    };
    write("idx_images", "two-3x3", &idx_images_bytes(&tiny));
    let empty = IdxImages {
        count: 0,
        rows: 28,
        cols: 28,
        pixels: Vec::new(),
    };
    write("idx_images", "empty-28x28", &idx_images_bytes(&empty));

    write("idx_labels", "ten-digits", &idx_labels_bytes(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]));
    write("idx_labels", "empty", &idx_labels_bytes(&[]));

    let config = ModelConfig {
        input_dim: 4,
        hidden_widths: vec![3, 3],
        num_classes: 2,
        split_index: 1,
        leaky_slope: 0.01,
        disc_hidden: 3,
        disc_dropout_rate: 0.5,
    };
    let params = init_params(&config, &mut RngState::new(7)).expect("init");
    write(
        "checkpoint",
        "tiny-4-3-3-2",
        &write_checkpoint_bytes(&params, &config).expect("encode"),
    );
}
