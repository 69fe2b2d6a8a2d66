//! Renders a few synthetic images and their masks as ASCII, draws a few-shot
//! split and writes the dataset manifest.
//!
//! cargo run --example dataset_tour

use prompt_lab::datagen::{generate_dataset, held_out, sample_few_shot, Vocabulary};

fn main() -> prompt_lab::Result<()> {
    let data = generate_dataset(4, 6, 16, 1)?;
    let masks = data.masks()?;
    println!(
        "classes {:?}  base {:?}  novel {:?}",
        data.class_names, data.base_classes, data.novel_classes
    );
    let vocab = Vocabulary::standard();
    for (i, name) in data.class_names.iter().enumerate() {
        let idx = data
            .labels
            .iter()
            .position(|&l| l == i)
            .expect("every class is populated");
        let (img, mask) = (&data.images[idx], &masks[idx]);
        println!("\n{name}  tokens {:?}", vocab.tokenize_template(name)?);
        for r in 0..img.size() {
            let row: String = (0..img.size())
                .map(|c| match (mask.get(r, c), img.get(r, c) > 0.0) {
                    (true, _) => '#',
                    (false, true) => '+',
                    (false, false) => '.',
                })
                .collect();
            println!("  {row}");
        }
    }
    let shots = sample_few_shot(&data, 2, &data.base_classes, 1)?;
    println!("\n2-shot sample {shots:?}");
    println!(
        "held-out base images {:?}",
        held_out(&data, &shots, &data.base_classes)
    );
    Ok(())
}
