//! Locating the subject words a caption's image prompt replaces.

use videobooth::dataset::parse_subject_span;

fn main() {
    for caption in [
        "a happy dog runs across the field",
        "papillon dog celebrates birthday with gifts",
        "the old brown bear climbs a tree",
        "my red car drives along the coast",
        "sunset over the ocean",
    ] {
        match parse_subject_span(caption) {
            Ok(p) => println!("{caption:<45} -> k={} n={} {:?} head={}", p.k, p.n, &p.tokens[p.k..p.k + p.n], p.head),
            Err(e) => println!("{caption:<45} -> {e}"),
        }
    }
}
