fn main() {
    println!("atom");
}
