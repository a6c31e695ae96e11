macro_rules! example {
    ($name:ident, $file:literal) => {
        #[allow(dead_code)]
        mod $name {
            include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/", $file));
        }

        #[test]
        fn $name() {
            $name::run_example().expect(concat!($file, " should run"));
        }
    };
}

example!(sample_3d, "sample_3d.rs");
example!(adaptive_mixing, "adaptive_mixing.rs");
example!(iof_attention, "iof_attention.rs");
example!(decoder_forward, "decoder_forward.rs");
example!(hungarian_matching, "hungarian_matching.rs");
example!(gradient_check, "gradient_check.rs");
example!(toy_training, "toy_training.rs");
example!(sampling_trace_svg, "sampling_trace_svg.rs");
