//! Build a class catalog, render one scene per split and print its label map.

use sign::datagen::{make_class_catalog, render_sample, Split};

fn main() -> sign::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cat = make_class_catalog(7, 3, seed)?;
    for c in &cat.classes {
        let side = if cat.unseen.contains(&c.id) { "unseen" } else { "seen" };
        println!("{:>2} {:<24} {side}", c.id, c.name);
    }
    for split in Split::ALL {
        let s = render_sample(&cat, split, 0, seed, (32, 32))?;
        println!("\n{} #0 (contains unseen: {})", split.as_str(), s.has_unseen);
        for r in (0..32).step_by(2) {
            let row: String = (0..32)
                .map(|c| match s.labels.get(r, c) {
                    0 => '.',
                    id => char::from_digit(id as u32, 36).unwrap_or('?'),
                })
                .collect();
            println!("{row}");
        }
    }
    Ok(())
}
