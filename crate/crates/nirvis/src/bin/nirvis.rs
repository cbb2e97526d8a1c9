fn main() {
    // Placeholder; the CLI is wired up in pipeline.rs and filled in below.
}
