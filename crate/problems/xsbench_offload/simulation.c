// Excerpt of the offloaded lookup kernel with tunable sites.
void run_event_based_simulation(Inputs in, SimulationData GSD, int mype)
{
	unsigned long long verification = 0;
	#pragma omp target teams distribute parallel for #Pp4 #Pp5 #Pp7 map(tofrom:verification) reduction(+:verification)
	for (int i = 0; i < in.lookups; i++) {
		#Pp3
		for (int k = 0; k < 5; k++) {
			verification += lookup(i, k, GSD);
		}
	}
}
