//! Guide chapters compiled as doc-tests.

macro_rules! chapter {
    ($name:ident, $file:literal) => {
        #[doc = include_str!(concat!("../../../book/src/", $file))]
        pub mod $name {}
    };
}

chapter!(introduction, "introduction.md");
chapter!(layout, "layout.md");
chapter!(reference, "reference.md");
chapter!(coarse, "coarse.md");
chapter!(taylor, "taylor.md");
chapter!(pipeline, "pipeline.md");
chapter!(analysis, "analysis.md");
chapter!(workloads, "workloads.md");
chapter!(bench, "bench.md");
