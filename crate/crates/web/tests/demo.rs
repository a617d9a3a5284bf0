use genequery_web::Demo;

#[test]
fn untrained_demo_refuses_predictions() {
    let d = Demo::new(1).unwrap();
    assert_eq!(d.truth_map(0).unwrap().len(), d.side() * d.side());
    assert!(d.predict_map(0).is_err());
    assert!(d.cluster(2).is_err());
    assert!(d.truth_map(d.gene_count()).is_err());
    let seen = (0..d.gene_count()).filter(|&g| d.is_seen(g)).count();
    assert_eq!(seen, 18);
}

#[test]
fn training_then_queries() {
    let mut d = Demo::new(3).unwrap();
    let losses = d.train(40).unwrap();
    assert_eq!(losses.len(), 40);
    assert!(losses[39] < losses[0]);
    let n = d.side() * d.side();
    let held_out = (0..d.gene_count()).find(|&g| !d.is_seen(g)).unwrap();
    let p = d.predict_map(held_out).unwrap();
    assert_eq!(p.len(), n);
    assert!(p.iter().all(|v| v.is_finite()));
    // a query by the same text is the same gene to the model
    let q = d.query_map(&d.gene_description(held_out)).unwrap();
    assert_eq!(p, q);
    assert!(d.query_map("").is_ok());
    let c = d.correlation(held_out).unwrap();
    assert!((-1.0..=1.0).contains(&c));
    let labels = d.cluster(3).unwrap();
    assert_eq!(labels.len(), n);
    assert!(labels.iter().all(|&l| l < 3));
    assert_eq!(labels, d.cluster(3).unwrap());
    assert!(d.cluster(n + 1).is_err());
}

#[test]
fn training_is_deterministic() {
    let (mut a, mut b) = (Demo::new(5).unwrap(), Demo::new(5).unwrap());
    assert_eq!(a.train(3).unwrap(), b.train(3).unwrap());
}
