//! Binds the guide's chapters into rustdoc so every code block in
//! `book/` compiles and runs under `cargo test`. The book cannot drift
//! from the library.

macro_rules! chapter {
    ($name:ident, $path:literal) => {
        #[doc = include_str!($path)]
        pub mod $name {}
    };
}

chapter!(introduction, "../../../book/src/introduction.md");
chapter!(tensors, "../../../book/src/tensors.md");
chapter!(attention, "../../../book/src/attention.md");
chapter!(network, "../../../book/src/network.md");
chapter!(selection, "../../../book/src/selection.md");
chapter!(losses, "../../../book/src/losses.md");
chapter!(data, "../../../book/src/data.md");
chapter!(training, "../../../book/src/training.md");
chapter!(complexity, "../../../book/src/complexity.md");
chapter!(cli, "../../../book/src/cli.md");
