use newscap_core::math;
use newscap_core::nee::{
    evaluate_nep, lookup_entity, text_vector, toy_kb, train_joint_logged, NeeConfig, ToyKbConfig,
};
use newscap_core::rng;
use rand::Rng;

#[test]
fn trained_table_ranks_and_falls_back() {
    let toy = toy_kb(&ToyKbConfig::default(), 11).unwrap();
    let cfg = NeeConfig::default();
    let start = std::time::Instant::now();
    let (table, log) = train_joint_logged(&toy.kb, &cfg, 5).unwrap();
    eprintln!("trained in {:?}", start.elapsed());
    let first = log.epoch_losses.first().unwrap()[3];
    let last = log.epoch_losses.last().unwrap()[3];
    assert!(last < first, "nep loss {first} -> {last}");

    let outcomes = evaluate_nep(&table, &toy.kb, &toy.held_out, 50, 3).unwrap();
    let mean_rank = outcomes.iter().map(|o| o.rank as f64).sum::<f64>() / outcomes.len() as f64;
    eprintln!("mean rank {mean_rank}");
    assert!(mean_rank <= 5.0, "mean rank {mean_rank}");

    let mut rng = rng::seeded(8);
    let mut wins = 0;
    for a in &toy.held_out {
        let fallback = lookup_entity(None, &a.context, &table).unwrap();
        assert_eq!(fallback, text_vector(&a.context, &table).unwrap());
        let truth = table.entity_vector(&a.entity).unwrap();
        let other = loop {
            let e = &toy.kb.entities[rng.random_range(0..toy.kb.entities.len())];
            if *e != a.entity {
                break e;
            }
        };
        if math::cosine(&fallback, truth) > math::cosine(&fallback, table.entity_vector(other).unwrap()) {
            wins += 1;
        }
    }
    let share = wins as f64 / toy.held_out.len() as f64;
    eprintln!("fallback win share {share}");
    assert!(share >= 0.8);
}
