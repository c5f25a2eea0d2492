fn main() {
    // CLI wiring lands with the trainer.
}
