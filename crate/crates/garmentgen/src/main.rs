fn main() {
    // CLI wired up in a later step.
}
